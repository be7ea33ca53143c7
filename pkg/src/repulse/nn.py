"""
Dense feed-forward networks over flat parameter vectors.

A network is described by an ``MlpSpec`` and its parameters live in one flat float64
vector. The canonical order is, layer by layer: the weight matrix of shape
(d_out, d_in) in row-major order, then the d_out biases. Checkpoints and the
parameter-space kernel both rely on this order.

Forward pass:
    h_0 = x
    z_l = h_l W_l^T + b_l
    h_{l+1} = act(z_l) for hidden layers, output = z_L (linear)

Backward pass returns the gradient of <cotangent, f(x; theta)> with respect to theta in
the same canonical order. ReLU's subgradient at 0 is taken as 0.

Spectral normalization follows the one-step power iteration scheme: each call refines
the singular-vector estimates (u, v) once and rescales the weight by min(1, c / sigma)
with sigma = u^T W v.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, SpecError
from .models import Activation, Matrix, MlpSpec, ParamVector

DEFAULT_SPECTRAL_COEFF = 3.0

Layer = tuple[Matrix, Matrix]  # (weight d_out x d_in, bias d_out)


def unflatten(params: ParamVector, spec: MlpSpec) -> list[Layer]:
    """
    Split a flat parameter vector into per-layer (weight, bias) views.

    The returned arrays share memory with ``params``; writing to them updates the
    vector in place.

    Raises:
        DimensionMismatch: If the vector length differs from the spec's parameter count.
    """
    if params.ndim != 1 or params.shape[0] != spec.parameter_count:
        raise DimensionMismatch(
            f"expected {spec.parameter_count} parameters for widths {spec.layer_widths}, "
            f"got shape {params.shape}"
        )
    layers: list[Layer] = []
    offset = 0
    for d_out, d_in in spec.layer_shapes:
        weight = params[offset : offset + d_out * d_in].reshape(d_out, d_in)
        offset += d_out * d_in
        bias = params[offset : offset + d_out]
        offset += d_out
        layers.append((weight, bias))
    return layers


def flatten(layers: list[Layer]) -> ParamVector:
    """Concatenate (weight, bias) pairs into the canonical flat order."""
    parts: list[Matrix] = []
    for weight, bias in layers:
        parts.append(np.ravel(weight))
        parts.append(np.ravel(bias))
    return np.concatenate(parts).astype(np.float64, copy=False)


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """
    Draw weights uniformly on [-1/sqrt(fan_in), 1/sqrt(fan_in)] with zero biases.

    Args:
        spec: Network shape.
        rng: Source of randomness; the result is deterministic given its state.

    Returns:
        A fresh flat parameter vector.
    """
    params = np.zeros(spec.parameter_count, dtype=np.float64)
    for weight, _bias in unflatten(params, spec):
        bound = 1.0 / np.sqrt(weight.shape[1])
        weight[...] = rng.uniform(-bound, bound, size=weight.shape)
    return params


def _activate(z: Matrix, activation: Activation) -> Matrix:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: Matrix, activation: Activation) -> Matrix:
    if activation is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def _check_inputs(inputs: Matrix, spec: MlpSpec) -> Matrix:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionMismatch(
            f"input width {x.shape[-1] if x.ndim else 'scalar'} does not match "
            f"expected {spec.input_dim} (shape {x.shape})",
            layer=0,
        )
    return x


def _trace(params: ParamVector, spec: MlpSpec, inputs: Matrix) -> tuple[list[Matrix], list[Matrix]]:
    """Run the forward pass keeping each layer's input and pre-activation."""
    layers = unflatten(params, spec)
    h = _check_inputs(inputs, spec)
    layer_inputs: list[Matrix] = []
    pre_activations: list[Matrix] = []
    for index, (weight, bias) in enumerate(layers):
        layer_inputs.append(h)
        z = h @ weight.T + bias
        pre_activations.append(z)
        if index < len(layers) - 1:
            h = _activate(z, spec.activation)
    return layer_inputs, pre_activations


def forward(params: ParamVector, spec: MlpSpec, inputs: Matrix) -> Matrix:
    """
    Evaluate the network on a batch.

    Args:
        params: Flat parameters in canonical order.
        spec: Network shape.
        inputs: B x d_in matrix.

    Returns:
        B x d_out matrix of linear outputs (logits or regression means).

    Raises:
        DimensionMismatch: On parameter-count or input-width mismatch.

    Example:
        >>> spec = MlpSpec((1, 1))
        >>> forward(np.array([1.0, 0.0]), spec, np.array([[3.0]]))
        array([[3.]])
    """
    _, pre_activations = _trace(params, spec, inputs)
    return pre_activations[-1]


def features(params: ParamVector, spec: MlpSpec, inputs: Matrix) -> Matrix:
    """Base-network features: the hidden activation applied to the final affine output."""
    return _activate(forward(params, spec, inputs), spec.activation)


def backward(
    params: ParamVector, spec: MlpSpec, inputs: Matrix, output_cotangent: Matrix
) -> ParamVector:
    """
    Reverse-mode gradient of <output_cotangent, f(inputs; params)>.

    Args:
        params: Flat parameters in canonical order.
        spec: Network shape.
        inputs: B x d_in matrix.
        output_cotangent: B x d_out matrix.

    Returns:
        Gradient in canonical flat order.

    Raises:
        DimensionMismatch: On any shape inconsistency.
    """
    layer_inputs, pre_activations = _trace(params, spec, inputs)
    layers = unflatten(params, spec)
    delta = np.asarray(output_cotangent, dtype=np.float64)
    if delta.shape != pre_activations[-1].shape:
        raise DimensionMismatch(
            f"cotangent shape {delta.shape} does not match output shape "
            f"{pre_activations[-1].shape}",
            layer=spec.n_layers - 1,
        )

    grads: list[Layer] = []
    for index in range(spec.n_layers - 1, -1, -1):
        weight, _bias = layers[index]
        grads.append((delta.T @ layer_inputs[index], delta.sum(axis=0)))
        if index > 0:
            delta = (delta @ weight) * _activate_grad(pre_activations[index - 1], spec.activation)
    grads.reverse()
    return flatten(grads)


def split_network(
    params: ParamVector, spec: MlpSpec, head_layers: int = 1
) -> tuple[MlpSpec, ParamVector, MlpSpec, ParamVector]:
    """
    Split a trained network into a base feature extractor and a head.

    ``forward(head, features(base, x))`` equals ``forward(params, x)``.

    Args:
        params: Flat parameters of the full network.
        spec: Full network shape.
        head_layers: Number of trailing dense layers assigned to the head.

    Returns:
        (base_spec, base_params, head_spec, head_params)

    Raises:
        SpecError: If the split leaves no base layer.
    """
    if not 1 <= head_layers < spec.n_layers:
        raise SpecError(
            f"cannot split {spec.n_layers} layers into a base and {head_layers} head layer(s)"
        )
    unflatten(params, spec)  # length check
    cut = spec.n_layers - head_layers
    base_spec = MlpSpec(spec.layer_widths[: cut + 1], spec.activation)
    head_spec = MlpSpec(spec.layer_widths[cut:], spec.activation)
    n_base = base_spec.parameter_count
    return base_spec, params[:n_base].copy(), head_spec, params[n_base:].copy()


@dataclass
class SpectralState:
    """Singular-vector estimates for one dense layer."""

    u: Matrix  # d_out, unit norm
    v: Matrix  # d_in, unit norm
    coeff: float = DEFAULT_SPECTRAL_COEFF

    @classmethod
    def create(
        cls, d_out: int, d_in: int, rng: np.random.Generator, coeff: float = DEFAULT_SPECTRAL_COEFF
    ) -> "SpectralState":
        """Random unit vectors for a d_out x d_in layer."""
        u = rng.standard_normal(d_out)
        v = rng.standard_normal(d_in)
        return cls(u=u / np.linalg.norm(u), v=v / np.linalg.norm(v), coeff=coeff)


def spectral_normalize(weight: Matrix, state: SpectralState) -> tuple[Matrix, SpectralState]:
    """
    One power-iteration step, then rescale the weight to spectral norm <= coeff.

    Args:
        weight: d_out x d_in matrix.
        state: Current (u, v) estimates for this layer.

    Returns:
        (weight * min(1, coeff / sigma), updated state). A zero matrix is returned
        unchanged together with the unchanged state.

    Raises:
        DimensionMismatch: If the state vectors do not match the weight shape.

    Example:
        >>> e1 = np.array([1.0, 0.0])
        >>> w, _ = spectral_normalize(np.diag([3.0, 1.0]), SpectralState(e1, e1, 1.0))
        >>> np.allclose(w, np.diag([1.0, 1 / 3]))
        True
    """
    d_out, d_in = weight.shape
    if state.u.shape != (d_out,) or state.v.shape != (d_in,):
        raise DimensionMismatch(
            f"spectral state ({state.u.shape}, {state.v.shape}) "
            f"does not match weight {weight.shape}"
        )
    v = weight.T @ state.u
    v_norm = np.linalg.norm(v)
    if v_norm == 0.0:
        return weight, state
    v = v / v_norm
    u = weight @ v
    u = u / np.linalg.norm(u)
    sigma = float(u @ weight @ v)
    new_state = SpectralState(u=u, v=v, coeff=state.coeff)
    if sigma <= state.coeff:
        return weight.copy(), new_state
    return weight * (state.coeff / sigma), new_state


@dataclass
class SpectralNormalizer:
    """
    Online spectral normalization for the dense layers of many networks.

    Keeps one ``SpectralState`` per (network key, layer index), created on first use
    from a seeded generator.
    """

    coeff: float = DEFAULT_SPECTRAL_COEFF
    seed: int = 0
    states: dict[tuple[int, int], SpectralState] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.coeff > 0:
            raise SpecError(f"spectral coefficient must be positive, got {self.coeff}")
        self._rng = np.random.default_rng(self.seed)

    def apply(self, params: ParamVector, spec: MlpSpec, key: int, layers: range) -> ParamVector:
        """
        Normalize the selected layers of one network.

        Args:
            params: Flat parameters (not modified).
            spec: Network shape.
            key: Identifies the network across calls (e.g. the particle index).
            layers: Indices of the dense layers to normalize.

        Returns:
            A new parameter vector with the selected weights rescaled.
        """
        out = params.copy()
        views = unflatten(out, spec)
        for index in layers:
            weight, _bias = views[index]
            state = self.states.get((key, index))
            if state is None:
                state = SpectralState.create(*weight.shape, rng=self._rng, coeff=self.coeff)
            normalized, self.states[(key, index)] = spectral_normalize(weight, state)
            weight[...] = normalized
        return out
