"""Data models for repulse."""

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
import numpy.typing as npt

from .errors import KernelError, LabelOutOfRange, SpecError

# Flat float64 parameter vector in canonical order
ParamVector = npt.NDArray[np.float64]
Matrix = npt.NDArray[np.float64]


class Activation(Enum):
    """Hidden-layer nonlinearity."""

    RELU = "relu"
    TANH = "tanh"


class ParticleMode(Enum):
    """How particles are parameterized."""

    FULL_ENSEMBLE = "full-ensemble"  # n independent networks
    MULTI_HEAD = "multi-head"  # one shared base, n heads


class Space(Enum):
    """Where the repulsion kernel is evaluated."""

    PARAMETER = "parameter"
    FUNCTION = "function"


class Distance(Enum):
    """Distance underlying the kernel exp(-d/nu)."""

    L1 = "l1"
    L2 = "l2"
    SQ_L2 = "sq-l2"


class BandwidthRule(Enum):
    """How the kernel bandwidth nu is chosen."""

    FIXED = "fixed"
    MEDIAN = "median"


class Representation(Enum):
    """Function-space vector built from particle outputs."""

    LOGITS = "logits"
    PROBABILITIES = "probabilities"


class TargetKind(Enum):
    """Dataset target type."""

    CLASS = "class"
    REGRESSION = "regression"


class ScoreKind(Enum):
    """Per-sample uncertainty score used for OOD detection and acquisition."""

    EPISTEMIC = "epistemic"
    TOTAL = "total"
    ALEATORIC = "aleatoric"
    RANDOM = "random"


@dataclass(frozen=True)
class MlpSpec:
    """
    Feed-forward network shape.

    ``layer_widths`` lists the input width first and the output width last. Hidden
    layers use ``activation``; the output layer is linear.
    """

    layer_widths: tuple[int, ...]
    activation: Activation = Activation.RELU

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise SpecError(f"layer_widths needs at least 2 entries, got {len(widths)}")
        if any(w < 1 for w in widths):
            raise SpecError(f"layer widths must be positive, got {widths}")
        object.__setattr__(self, "layer_widths", widths)

    @classmethod
    def create(
        cls,
        input_dim: int,
        hidden: list[int],
        output_dim: int,
        activation: Activation = Activation.RELU,
    ) -> "MlpSpec":
        """
        Factory method from an input width, hidden widths and an output width.

        Example:
            >>> MlpSpec.create(1, [128, 128, 128], 1).parameter_count
            33409
        """
        return cls((input_dim, *hidden, output_dim), activation)

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        """Number of dense layers."""
        return len(self.layer_widths) - 1

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(d_out, d_in) per dense layer."""
        return [
            (self.layer_widths[i + 1], self.layer_widths[i]) for i in range(self.n_layers)
        ]

    @property
    def parameter_count(self) -> int:
        return sum(d_out * d_in + d_out for d_out, d_in in self.layer_shapes)


def parameter_count(spec: MlpSpec) -> int:
    """Sum over consecutive width pairs of d_in*d_out + d_out."""
    return spec.parameter_count


@dataclass(frozen=True)
class KernelConfig:
    """Repulsion kernel settings."""

    space: Space = Space.FUNCTION
    distance: Distance = Distance.SQ_L2
    bandwidth: BandwidthRule = BandwidthRule.MEDIAN
    nu: float = 1.0  # used when bandwidth is FIXED
    representation: Representation = Representation.LOGITS

    def __post_init__(self) -> None:
        if self.bandwidth is BandwidthRule.FIXED and not self.nu > 0:
            raise KernelError(f"fixed bandwidth must be positive, got {self.nu}")


@dataclass
class Dataset:
    """
    Inputs with class labels or regression targets.

    Classification targets are stored as int64, regression targets as float64.
    """

    inputs: Matrix
    targets: npt.NDArray[np.int64] | npt.NDArray[np.float64]
    name: str = "dataset"
    ambiguous: Optional[npt.NDArray[np.bool_]] = None
    num_classes: Optional[int] = None
    # N x 2 source classes of mixed samples, -1 if clean
    sources: Optional[npt.NDArray[np.int64]] = None

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise SpecError(f"dataset '{self.name}' is empty")
        if len(self.targets) != self.inputs.shape[0]:
            raise SpecError(
                f"dataset '{self.name}': {self.inputs.shape[0]} inputs but "
                f"{len(self.targets)} targets"
            )
        if self.is_classification:
            labels = np.asarray(self.targets, dtype=np.int64)
            if self.num_classes is None:
                self.num_classes = int(labels.max()) + 1
            if labels.min() < 0 or labels.max() >= self.num_classes:
                raise LabelOutOfRange(
                    f"dataset '{self.name}': labels must lie in [0, {self.num_classes})"
                )
            self.targets = labels
        else:
            self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.ambiguous is not None:
            self.ambiguous = np.asarray(self.ambiguous, dtype=bool)

    @property
    def is_classification(self) -> bool:
        return np.issubdtype(np.asarray(self.targets).dtype, np.integer)

    @property
    def target_kind(self) -> TargetKind:
        return TargetKind.CLASS if self.is_classification else TargetKind.REGRESSION

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def dim(self) -> int:
        return int(self.inputs.shape[1])

    def subset(self, indices: npt.NDArray[np.int64], name: Optional[str] = None) -> "Dataset":
        """Rows at ``indices`` as a new dataset (class count preserved)."""
        return Dataset(
            inputs=self.inputs[indices],
            targets=self.targets[indices],
            name=name or self.name,
            ambiguous=None if self.ambiguous is None else self.ambiguous[indices],
            num_classes=self.num_classes,
            sources=None if self.sources is None else self.sources[indices],
        )
