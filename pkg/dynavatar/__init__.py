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

from .errors import *
from . import asserts
from . import mesh
from .body_model import (
    BodyModel,
    PoseState,
    CameraModel,
    UVGrid,
    default_body,
    load_body_model,
    save_body_model,
)
from .config import ExperimentConfig, load_config
from .synth_data import Dataset, generate_dataset, read_dataset, write_dataset
from .explicit_stage import Stage1Checkpoint, train_stage1
from .motion_stage import Stage2Checkpoint, Variant, animate, train_stage2
from .metrics_eval import EvalReport, ssim, tof, chamfer, optical_flow
