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

"""

Exception types raised by dynavatar.

Everything a caller can fix by passing different data derives from
InvalidInputError; the command line maps that family to exit code 2.

"""

__all__ = [
    "InvalidInputError",
    "MissingArtifactError",
    "CorruptArtifactError",
    "SimulationError",
    "TrainingDivergedError",
]

from qcore.errors import ArgumentError, OperationError


class InvalidInputError(ArgumentError):
    """An input was rejected: wrong shape, broken mesh, unknown key and so on."""

    pass


class MissingArtifactError(InvalidInputError):
    """A file that an operation depends on does not exist."""

    def __init__(self, path, what=None):
        self.path = str(path)
        self.what = what
        if what is None:
            message = "missing artifact: %s" % self.path
        else:
            message = "missing %s: %s" % (what, self.path)
        super().__init__(message)


class CorruptArtifactError(InvalidInputError):
    """A file exists but can't be decoded."""

    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = reason
        super().__init__("corrupt artifact %s: %s" % (self.path, reason))


class SimulationError(OperationError):
    """The cloth simulation received a state it can't integrate."""

    pass


class TrainingDivergedError(OperationError):
    """Training was aborted; diagnostics describes the offending step."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
