"""Trainable parameters of the whole network and the runtime switches that
shape a forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import RRELU_LOWER, RRELU_UPPER, Tensor, rrelu


@dataclass(frozen=True)
class Ablation:
    """Runtime switches for the four ablation variants (all on = full model)."""

    multi_span: bool = True
    disentangle: bool = True
    virtual_graph: bool = True

    @classmethod
    def from_names(cls, names) -> "Ablation":
        flags = {"multi_span": True, "disentangle": True, "virtual_graph": True}
        for name in names:
            key = name.replace("-", "_").lower()
            if key in ("g_inf", "virtual", "sampling"):
                key = "virtual_graph"
            if key not in flags:
                raise ValueError(f"unknown ablation {name!r}")
            flags[key] = False
        return cls(**flags)

    def names(self) -> list[str]:
        return [k.replace("_", "-") for k, on in vars(self).items() if not on]


@dataclass
class Runtime:
    """Activation mode plus the rng used by train-mode RReLU."""

    mode: str = "eval"
    rng: np.random.Generator | None = None
    lower: float = RRELU_LOWER
    upper: float = RRELU_UPPER

    def act(self, x: Tensor) -> Tensor:
        return rrelu(x, self.mode, self.lower, self.upper, self.rng)


@dataclass(frozen=True)
class Dims:
    num_entities: int
    num_raw_relations: int
    d: int
    layers: int
    heads: int
    channels: int = 32
    kernel_width: int = 3

    def __post_init__(self):
        if self.d < 1 or self.layers < 1 or self.heads < 1:
            raise ValueError("d, layers and heads must all be >= 1")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.kernel_width % 2 == 0 or self.channels < 1:
            raise ValueError("kernel width must be odd and channels >= 1")

    @property
    def num_relations(self) -> int:
        return 2 * self.num_raw_relations

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


GRU_KEYS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def parameter_shapes(dims: Dims) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable tensor; weights act on row vectors (x @ W)."""
    d, dh = dims.d, dims.head_dim
    shapes: dict[str, tuple[int, ...]] = {
        "entity": (dims.num_entities, d),
        "relation": (dims.num_relations, d),
        "null_relation": (d,),
        "init.W_ig": (d, d),
        "init.b_ig": (d,),
        "init.g.W1": (2 * d, d),
        "init.g.b1": (d,),
        "init.g.W2": (d, d),
        "init.g.b2": (d,),
    }
    for l in range(1, dims.layers + 1):
        p = f"layer{l}."
        shapes.update({
            p + "W_nbr": (d, d),
            p + "W_sf": (d, d),
            p + "W_rel": (d, d),
            p + "b_rel": (d,),
            p + "pna_proj": (4 * d, d),
            p + "ln_gain": (d,),
            p + "ln_bias": (d,),
            p + "W_ce": (d, d),
            p + "W_ug": (d, d),
            p + "b_ug": (d,),
        })
    for h in range(dims.heads):
        p = f"dis.head{h}."
        shapes.update({p + "W_q": (2 * dh, dh), p + "W_k": (2 * dh, dh), p + "W_v": (dh, dh)})
    shapes["dis.self_loop"] = (d,)
    for key in GRU_KEYS:
        shapes["dis.gru." + key] = (d,) if key.startswith("b") else (d, d)
    w, c = dims.kernel_width, dims.channels
    shapes.update({
        "dec.kernel": (2 * w, c),
        "dec.conv_bias": (c,),
        "dec.proj": (c * d, d),
        "dec.proj_bias": (d,),
    })
    return shapes


def _is_bias(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b_") or leaf in ("b1", "b2", "conv_bias", "proj_bias", "ln_bias")


class ModelState:
    """All trainable tensors, addressable by name."""

    def __init__(self, dims: Dims, params: dict[str, Tensor]):
        self.dims = dims
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    @classmethod
    def initialize(cls, dims: Dims, seed: int = 0, scheme: str = "glorot") -> "ModelState":
        """Glorot-uniform weights and embeddings, zero biases, unit layer-norm gains.

        ``scheme="zeros"`` gives an all-zero network (every score 0.5).
        """
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(dims).items():
            if scheme == "zeros":
                data = np.zeros(shape)
            elif name.endswith("ln_gain"):
                data = np.ones(shape)
            elif _is_bias(name):
                data = np.zeros(shape)
            else:
                fan_in, fan_out = (1, shape[0]) if len(shape) == 1 else shape
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                data = rng.uniform(-limit, limit, size=shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(dims, params)

    def layer(self, l: int, key: str) -> Tensor:
        return self.params[f"layer{l}.{key}"]

    def gru_params(self) -> dict[str, Tensor]:
        return {k: self.params["dis.gru." + k] for k in GRU_KEYS}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name}")
            if arrays[name].shape != t.shape:
                raise ValueError(f"parameter {name}: shape {arrays[name].shape} != expected {t.shape}")
            t.data[...] = arrays[name]

    def copy(self) -> "ModelState":
        return ModelState(self.dims, {k: Tensor(t.data.copy(), True, k) for k, t in self.params.items()})


@dataclass
class Factors:
    active: Tensor
    stable: Tensor

    @classmethod
    def zeros(cls, n: int, d: int) -> "Factors":
        return cls(Tensor(np.zeros((n, d))), Tensor(np.zeros((n, d))))


@dataclass
class EvolutionState:
    """Updated node features for layers 0..omega at one timestamp."""

    layers: list[Tensor]
    gates: list[Tensor] = field(default_factory=list)
    aggregated: list[Tensor] = field(default_factory=list)
    init_gate: Tensor | None = None

    @property
    def final(self) -> Tensor:
        return self.layers[-1]
