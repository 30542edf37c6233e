"""Networks: the x0-predicting MLP (generator, score estimator, reference)
and the multi-head data-space discriminator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, Tensor
from .numerics import autodiff as T


@dataclass(frozen=True)
class NetArch:
    data_dim: int = 2
    hidden: tuple[int, ...] = (128, 128, 128)
    temb_dim: int = 16
    n_classes: int = 0

    def validate(self) -> None:
        if self.data_dim < 1 or self.temb_dim < 2 or self.temb_dim % 2:
            raise ValueError("data_dim must be >= 1 and temb_dim a positive even number")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must be positive, got {self.hidden}")


@dataclass(frozen=True)
class DiscArch:
    data_dim: int = 2
    trunk: tuple[int, ...] = (128, 128, 128)
    head_depths: tuple[int, ...] = (1, 2, 3)
    head_hidden: int = 64
    input_scale: float = 4.0
    freeze_trunk: bool = True

    def validate(self) -> None:
        if any(h < 1 for h in self.trunk) or self.head_hidden < 1:
            raise ValueError("discriminator widths must be positive")
        if len(self.head_depths) < 2 or len(set(self.head_depths)) != len(self.head_depths):
            raise ValueError("need at least two heads at distinct trunk depths")
        if min(self.head_depths) < 1 or max(self.head_depths) > len(self.trunk):
            raise ValueError(f"head depths {self.head_depths} outside trunk of depth {len(self.trunk)}")


def timestep_embedding(t, n: int, dim: int) -> np.ndarray:
    """Sinusoidal features ``[n, dim]`` of integer timesteps."""
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _kaiming(rng: Rng, fan_in: int, fan_out: int, gain: float = 2.0) -> np.ndarray:
    return rng.normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)


class DenoiserNet:
    """MLP ``(x_t, t, c) -> x0`` with SiLU hidden layers and a zeroed output layer."""

    def __init__(self, arch: NetArch, arrays: dict[str, np.ndarray], trainable: bool = True):
        self.arch = arch
        self.names = list(arrays)
        self.params = [Tensor(np.array(arrays[k]), requires_grad=trainable) for k in self.names]
        self._by_name = dict(zip(self.names, self.params))

    @property
    def data_dim(self) -> int:
        return self.arch.data_dim

    def __getitem__(self, name: str) -> Tensor:
        return self._by_name[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in zip(self.names, self.params)}

    def forward(self, x: Tensor, t, cond=None) -> Tensor:
        n = x.shape[0]
        if x.data.ndim != 2 or x.shape[1] != self.arch.data_dim:
            raise ValueError(f"expected input [B, {self.arch.data_dim}], got {x.shape}")
        emb = timestep_embedding(t, n, self.arch.temb_dim)
        h = T.add(T.matmul(x, self["w_x"]), T.matmul(T.constant(emb), self["w_t"]))
        if self.arch.n_classes:
            onehot = np.zeros((n, self.arch.n_classes))
            if cond is not None:
                c = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
                if c.min() < 0 or c.max() >= self.arch.n_classes:
                    raise ValueError("condition id out of range")
                onehot[np.arange(n), c] = 1.0
            h = T.add(h, T.matmul(T.constant(onehot), self["w_c"]))
        elif cond is not None:
            raise ValueError("unconditional network received a condition")
        h = T.silu(T.bias_add(h, self["b_0"]))
        for i in range(1, len(self.arch.hidden)):
            h = T.silu(T.bias_add(T.matmul(h, self[f"w_{i}"]), self[f"b_{i}"]))
        return T.bias_add(T.matmul(h, self["w_out"]), self["b_out"])

    __call__ = forward

    def copy(self, trainable: bool = True) -> "DenoiserNet":
        return DenoiserNet(self.arch, {k: v.copy() for k, v in self.arrays().items()}, trainable)


def init_net(arch: NetArch, rng: Rng) -> DenoiserNet:
    """Kaiming-initialised trunk; output layer zeroed so the fresh net predicts 0."""
    arch.validate()
    d, hid = arch.data_dim, arch.hidden
    # first layer acts on [x, emb]; stored as two blocks so no concat is needed
    w_in = _kaiming(rng, d + arch.temb_dim, hid[0])
    arrays = {"w_x": w_in[:d].copy(), "w_t": w_in[d:].copy()}
    if arch.n_classes:
        arrays["w_c"] = rng.normal((arch.n_classes, hid[0])) * 0.5
    arrays["b_0"] = np.zeros(hid[0])
    for i in range(1, len(hid)):
        arrays[f"w_{i}"] = _kaiming(rng, hid[i - 1], hid[i])
        arrays[f"b_{i}"] = np.zeros(hid[i])
    arrays["w_out"] = np.zeros((hid[-1], d))
    arrays["b_out"] = np.zeros(d)
    return DenoiserNet(arch, arrays)


def ema_inject(psi, theta, lambda_ema: float) -> None:
    """``psi <- lambda * psi + (1 - lambda) * theta`` elementwise, in place."""
    if not 0.0 <= lambda_ema <= 1.0:
        raise ValueError(f"lambda_ema must be in [0, 1], got {lambda_ema}")
    p_list = psi.params if hasattr(psi, "params") else psi
    t_list = theta.params if hasattr(theta, "params") else theta
    if len(p_list) != len(t_list):
        raise ValueError("parameter lists differ in length")
    for p, q in zip(p_list, t_list):
        if p.shape != q.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    for p, q in zip(p_list, t_list):
        p.data *= lambda_ema
        p.data += (1.0 - lambda_ema) * q.data


def freeze_reference(net: DenoiserNet) -> DenoiserNet:
    """Deep, non-trainable snapshot (its params never join a tape)."""
    return net.copy(trainable=False)


class DiscriminatorNet:
    """Shared SiLU trunk with trainable logit heads tapping different depths.

    The trunk plays the frozen feature encoder; only the heads (and the trunk,
    if ``freeze_trunk`` is off) are optimised.
    """

    def __init__(self, arch: DiscArch, trunk: dict[str, np.ndarray], heads: dict[str, np.ndarray]):
        self.arch = arch
        self.trunk_names = list(trunk)
        self.head_names = list(heads)
        self.trunk = [Tensor(np.array(trunk[k]), requires_grad=not arch.freeze_trunk)
                      for k in self.trunk_names]
        self.heads = [Tensor(np.array(heads[k]), requires_grad=True) for k in self.head_names]
        self._by_name = dict(zip(self.trunk_names + self.head_names, self.trunk + self.heads))

    def __getitem__(self, name: str) -> Tensor:
        return self._by_name[name]

    @property
    def params(self) -> list[Tensor]:
        """Trainable parameters only."""
        return (self.heads if self.arch.freeze_trunk else self.trunk + self.heads)

    @property
    def n_heads(self) -> int:
        return len(self.arch.head_depths)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self._by_name[k].data for k in self.trunk_names + self.head_names}

    def forward(self, x: Tensor) -> list[Tensor]:
        if x.data.ndim != 2 or x.shape[1] != self.arch.data_dim:
            raise ValueError(f"discriminator expects [B, {self.arch.data_dim}], got {x.shape}")
        feats = []
        h = x
        for i in range(len(self.arch.trunk)):
            h = T.silu(T.bias_add(T.matmul(h, self[f"tw_{i}"]), self[f"tb_{i}"]))
            feats.append(h)
        logits = []
        for j, depth in enumerate(self.arch.head_depths):
            g = T.silu(T.bias_add(T.matmul(feats[depth - 1], self[f"hw_{j}_0"]), self[f"hb_{j}_0"]))
            logits.append(T.bias_add(T.matmul(g, self[f"hw_{j}_1"]), self[f"hb_{j}_1"]))
        return logits

    __call__ = forward

    def copy(self) -> "DiscriminatorNet":
        arr = self.arrays()
        return DiscriminatorNet(self.arch, {k: arr[k].copy() for k in self.trunk_names},
                                {k: arr[k].copy() for k in self.head_names})


def init_discriminator(arch: DiscArch, rng: Rng) -> DiscriminatorNet:
    arch.validate()
    trunk = {}
    fan_in = arch.data_dim
    for i, width in enumerate(arch.trunk):
        if i == 0:
            trunk[f"tw_{i}"] = rng.normal((fan_in, width)) * arch.input_scale
            trunk[f"tb_{i}"] = rng.uniform(width) * 2.0 * np.pi - np.pi
        else:
            trunk[f"tw_{i}"] = _kaiming(rng, fan_in, width)
            trunk[f"tb_{i}"] = np.zeros(width)
        fan_in = width
    heads = {}
    for j, depth in enumerate(arch.head_depths):
        width = arch.trunk[depth - 1]
        heads[f"hw_{j}_0"] = _kaiming(rng, width, arch.head_hidden)
        heads[f"hb_{j}_0"] = np.zeros(arch.head_hidden)
        heads[f"hw_{j}_1"] = np.zeros((arch.head_hidden, 1))
        heads[f"hb_{j}_1"] = np.zeros(1)
    return DiscriminatorNet(arch, trunk, heads)


def discriminator_forward(disc: DiscriminatorNet, x: Tensor) -> list[Tensor]:
    """Per-head logits, each ``[B, 1]``; differentiable in ``x`` and the heads."""
    return disc.forward(x)


def logits_array(logits: list[Tensor]) -> np.ndarray:
    """Stack per-head logits into ``[B, H]``."""
    return np.concatenate([l.data for l in logits], axis=1)

