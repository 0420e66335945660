from __future__ import annotations

from typing import Any


class ArtiposeError(ValueError):
    """Base error; `code` is what the CLI prints in its error payload."""

    code = "artipose_error"

    def __init__(self, message: str, details: Any = None):
        super().__init__(message)
        self.message = message
        self.details = details

    def payload(self) -> dict[str, Any]:
        return {"code": self.code, "message": self.message, "details": self.details}


class GroupConstructionError(ArtiposeError):
    code = "group_construction"


class InvalidRotation(ArtiposeError):
    code = "invalid_rotation"


class GroupMismatch(ArtiposeError):
    code = "group_mismatch"


class BadAxis(ArtiposeError):
    code = "bad_axis"


class EmptyCloud(ArtiposeError):
    code = "empty_cloud"


class LengthMismatch(ArtiposeError):
    code = "length_mismatch"


class ShapeMismatch(ArtiposeError):
    code = "shape_mismatch"


class PoseMissing(ArtiposeError):
    code = "pose_missing"


class MissingLabels(ArtiposeError):
    code = "missing_labels"


class TooFewParts(ArtiposeError):
    code = "too_few_parts"


class MissingJointState(ArtiposeError):
    code = "missing_joint_state"


class DegenerateMotion(ArtiposeError):
    code = "degenerate_motion"


class NotRevolute(ArtiposeError):
    code = "not_revolute"


class LabelMismatch(ArtiposeError):
    code = "label_mismatch"


class KindMismatch(ArtiposeError):
    code = "kind_mismatch"


class TooFewSamples(ArtiposeError):
    code = "too_few_samples"


class CountMismatch(ArtiposeError):
    code = "count_mismatch"


class NoValidView(ArtiposeError):
    code = "no_valid_view"


class InvalidFile(ArtiposeError):
    code = "invalid_file"


class VerificationFailed(ArtiposeError):
    code = "verification_failed"
