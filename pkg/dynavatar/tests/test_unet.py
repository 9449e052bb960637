# Copyright 2026 The dynavatar Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#   http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import torch

from qcore.asserts import assert_eq, assert_is

from dynavatar.asserts import assert_finite, assert_shape
from dynavatar.unet import UNet


def test_output_shape():
    net = UNet(3, 5, base_channels=4, depth=2)
    out, global_feature = net(torch.zeros((2, 3, 16, 16)))
    assert_shape((2, 5, 16, 16), out)
    assert_is(None, global_feature)


def test_global_head():
    torch.manual_seed(0)
    net = UNet(6, 8, base_channels=4, depth=3, global_features=7)
    out, global_feature = net(torch.randn((1, 6, 32, 32)))
    assert_shape((1, 8, 32, 32), out)
    assert_shape((1, 7), global_feature)
    assert_finite(out)
    assert_finite(global_feature)


def test_channel_widths_are_capped():
    net = UNet(1, 1, base_channels=2, depth=5)
    assert_eq(16, net.downs[-1][1][0].out_channels)
    out, _ = net(torch.zeros((1, 1, 32, 32)))
    assert_shape((1, 1, 32, 32), out)


def test_gradients_reach_the_input():
    net = UNet(2, 1, base_channels=4, depth=2, global_features=3)
    x = torch.randn((1, 2, 8, 8), requires_grad=True)
    out, global_feature = net(x)
    (out.sum() + global_feature.sum()).backward()
    assert_shape((1, 2, 8, 8), x.grad)
    assert_finite(x.grad)
