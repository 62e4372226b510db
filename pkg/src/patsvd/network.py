"""Trainable image-to-image network, its projected version and the full reconstructor.

The reconstructor is ``R(y) = B y + P U(B y)`` where ``B`` is truncated SVD,
``U`` a convolutional encoder-decoder acting on ``N x N`` coefficient images
and ``P`` the orthogonal projector onto the complement of the kept input
singular vectors.  Because ``P`` is applied last, the kept SVD coefficients of
``B y`` pass through unchanged.  Everything runs in float64.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as Fn
from torch import nn

from .io import factors_checksum, read_network_container, write_network_container
from .svd import SvdFactors, TruncationPolicy, complement_project, tsvd_apply

log = logging.getLogger(__name__)

DTYPE = torch.float64


class TrainingDivergedError(RuntimeError):
    pass


def _activation(name):
    return {"relu": torch.relu, "tanh": torch.tanh, "softplus": Fn.softplus,
            "identity": lambda t: t}[name]


class UNet(nn.Module):
    """Encoder-decoder with skip concatenations and a linear 1x1 output layer.

    ``channels`` gives the width per level; each level has two 3x3
    convolutions, levels are joined by 2x max pooling and 2x2 transposed
    convolutions.  Inputs whose side is not divisible by ``2**(levels-1)`` are
    zero padded and cropped back.
    """

    def __init__(self, channels=(16, 32, 64), activation="relu"):
        super().__init__()
        self.channels = tuple(channels)
        self.activation = activation
        self.act = _activation(activation)
        self.down = nn.ModuleList()
        prev = 1
        for c in self.channels:
            self.down.append(nn.ModuleList([nn.Conv2d(prev, c, 3, padding=1),
                                            nn.Conv2d(c, c, 3, padding=1)]))
            prev = c
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for c_hi, c_lo in zip(self.channels[:0:-1], self.channels[-2::-1]):
            self.up.append(nn.ConvTranspose2d(c_hi, c_lo, 2, stride=2))
            self.dec.append(nn.ModuleList([nn.Conv2d(2 * c_lo, c_lo, 3, padding=1),
                                           nn.Conv2d(c_lo, c_lo, 3, padding=1)]))
        self.out = nn.Conv2d(self.channels[0], 1, 1)

    def forward(self, x):
        n = x.shape[-1]
        mult = 2 ** (len(self.channels) - 1)
        pad = (-n) % mult
        if pad:
            x = Fn.pad(x, (0, pad, 0, pad))
        skips = []
        for level, (c1, c2) in enumerate(self.down):
            if level:
                x = Fn.max_pool2d(x, 2)
            x = self.act(c2(self.act(c1(x))))
            skips.append(x)
        skips.pop()
        for up, (c1, c2) in zip(self.up, self.dec):
            x = torch.cat([up(x), skips.pop()], dim=1)
            x = self.act(c2(self.act(c1(x))))
        x = self.out(x)
        return x[..., :n, :n] if pad else x

    def descriptor(self):
        return {"kind": "unet", "channels": list(self.channels), "activation": self.activation}


class LinearConv(nn.Module):
    """Single convolution, no activation."""

    def __init__(self, kernel_size=1):
        super().__init__()
        self.kernel_size = kernel_size
        self.conv = nn.Conv2d(1, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        return self.conv(x)

    def descriptor(self):
        return {"kind": "linear", "kernel_size": self.kernel_size}


def build_network(descriptor: dict) -> nn.Module:
    kind = descriptor.get("kind", "unet")
    if kind == "unet":
        net = UNet(descriptor.get("channels", (16, 32, 64)), descriptor.get("activation", "relu"))
    elif kind == "linear":
        net = LinearConv(descriptor.get("kernel_size", 1))
    else:
        raise ValueError(f"unknown network kind {kind!r}")
    return net.to(DTYPE)


def init_weights(net: nn.Module, seed: int):
    """Uniform weights in ``[-b, b]`` with ``b = sqrt(6 / fan_in)``, zero biases."""
    gen = torch.Generator().manual_seed(int(seed) % (2**63))
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p.shape[1] * math.prod(p.shape[2:]) if p.dim() > 1 else p.shape[0]
                if isinstance(_owner(net, name), nn.ConvTranspose2d):
                    fan_in = p.shape[0] * math.prod(p.shape[2:])
                bound = math.sqrt(6.0 / fan_in)
                p.copy_((torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)


def _owner(net, name):
    mod = net
    for part in name.split(".")[:-1]:
        mod = getattr(mod, part) if not part.isdigit() else mod[int(part)]
    return mod


@dataclass
class NetworkParams:
    """Network weights bound to one truncation of one set of SVD factors."""

    network: nn.Module
    threshold: float
    factors_checksum: int
    size: int

    @property
    def descriptor(self) -> dict:
        return self.network.descriptor()

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.network.parameters())

    def policy(self) -> TruncationPolicy:
        return TruncationPolicy(self.threshold)

    def check_factors(self, F: SvdFactors):
        got = factors_checksum(F)
        if got != self.factors_checksum:
            raise ValueError(f"network was trained for factors {self.factors_checksum:016x}, "
                             f"got {got:016x}")

    def zero_(self):
        with torch.no_grad():
            for p in self.network.parameters():
                p.zero_()
        return self


def make_params(F: SvdFactors, policy: TruncationPolicy, size: int, descriptor: dict | None = None,
                seed: int = 0) -> NetworkParams:
    net = build_network(descriptor or {"kind": "unet"})
    init_weights(net, seed)
    return NetworkParams(net, policy.threshold, factors_checksum(F), size)


def save_params(path, params: NetworkParams):
    state = params.network.state_dict()
    desc = {**params.descriptor, "size": params.size,
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()]}
    write_network_container(path, desc, [v.detach().cpu().numpy() for v in state.values()],
                            params.threshold, params.factors_checksum)


def load_params(path) -> NetworkParams:
    desc, tensors, threshold, checksum = read_network_container(path)
    net = build_network(desc)
    state = {spec["name"]: torch.from_numpy(t.copy()) for spec, t in zip(desc["tensors"], tensors)}
    net.load_state_dict(state)
    return NetworkParams(net, threshold, checksum, int(desc["size"]))


def _as_images(z, size):
    z = torch.as_tensor(np.asarray(z, dtype=float), dtype=DTYPE)
    batch = z.dim() == 2
    return z.reshape(-1, 1, size, size), batch


def network_forward(params: NetworkParams, z) -> np.ndarray:
    """``U(z)`` for a coefficient vector (or a batch of them), no projection."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != params.size**2:
        raise ValueError(f"input length {z.shape[-1]} does not match a {params.size}x{params.size} grid")
    imgs, batch = _as_images(z, params.size)
    with torch.no_grad():
        out = params.network(imgs).reshape(len(imgs), -1).numpy()
    return out if batch else out[0]


class _Projector:
    """Torch-side ``P z = z - V_k (V_k^T z)``; ``P`` is self-adjoint so autograd reuses it."""

    def __init__(self, F: SvdFactors, policy: TruncationPolicy):
        self.Vk = torch.from_numpy(np.ascontiguousarray(F.V[:, :F.kept(policy)]))

    def __call__(self, z):
        return z - (z @ self.Vk) @ self.Vk.T


def projected_forward(params: NetworkParams, F: SvdFactors, policy: TruncationPolicy, z) -> np.ndarray:
    """``Phi(z) = P U(z)``."""
    return complement_project(F, policy, network_forward(params, z))


def reconstruct(params: NetworkParams, F: SvdFactors, policy: TruncationPolicy, y) -> np.ndarray:
    """``R y = B y + P U(B y)`` for one data vector or a batch."""
    b = tsvd_apply(F, policy, y)
    return b + projected_forward(params, F, policy, b)


def _batch_loss(params, proj, B, X):
    imgs = B.reshape(-1, 1, params.size, params.size)
    out = params.network(imgs).reshape(len(B), -1)
    recon = B + proj(out)
    return ((X - recon) ** 2).sum(dim=1)


def loss_and_gradient(params: NetworkParams, X, Y, F: SvdFactors, policy: TruncationPolicy):
    """Mean over the batch of ``|x_n - R y_n|^2`` and its gradient.

    Returns ``(loss, grads)`` with ``grads`` a list of arrays in
    ``network.parameters()`` order.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if len(X) == 0 or len(X) != len(Y):
        raise ValueError("batch must be non-empty with matching x and y counts")
    B = torch.from_numpy(tsvd_apply(F, policy, Y))
    Xt = torch.from_numpy(X)
    params.network.zero_grad(set_to_none=True)
    per = _batch_loss(params, _Projector(F, policy), B, Xt)
    bad = ~torch.isfinite(per)
    if bad.any():
        raise FloatingPointError(f"non-finite loss for sample {int(bad.nonzero()[0, 0])}")
    loss = per.mean()
    loss.backward()
    grads = [p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape))
             for p in params.network.parameters()]
    return float(loss.detach()), grads


@dataclass
class GradientReport:
    max_relative_deviation: float
    tolerance: float
    passed: bool
    coordinates: list = field(default_factory=list)


def gradient_check(params: NetworkParams, X, Y, F: SvdFactors, policy: TruncationPolicy,
                   tolerance: float = 1e-4, coordinates: int = 50, step: float = 1e-5,
                   seed: int = 0) -> GradientReport:
    """Compare backprop gradients with central differences on random coordinates.

    The deviation of one coordinate is ``|g - g_fd| / max(|g|, |g_fd|, floor)``
    where ``floor = 1e-6 * max_k |g_k|`` guards against coordinates whose
    gradient vanishes; their backprop value is pure round-off.
    """
    loss, grads = loss_and_gradient(params, X, Y, F, policy)
    plist = list(params.network.parameters())
    sizes = [p.numel() for p in plist]
    flat_g = np.concatenate([g.ravel() for g in grads])
    floor = 1e-6 * max(np.abs(flat_g).max(), np.finfo(float).tiny)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(flat_g), size=min(coordinates, len(flat_g)), replace=False)
    offsets = np.cumsum([0] + sizes)
    B = torch.from_numpy(tsvd_apply(F, policy, np.atleast_2d(Y)))
    Xt = torch.from_numpy(np.atleast_2d(np.asarray(X, dtype=float)))
    proj = _Projector(F, policy)

    def value():
        with torch.no_grad():
            return float(_batch_loss(params, proj, B, Xt).mean())

    worst = 0.0
    records = []
    for idx in picks:
        which = int(np.searchsorted(offsets, idx, side="right") - 1)
        local = int(idx - offsets[which])
        flat = plist[which].data.view(-1)
        orig = float(flat[local])
        flat[local] = orig + step
        f_plus = value()
        flat[local] = orig - step
        f_minus = value()
        flat[local] = orig
        fd = (f_plus - f_minus) / (2 * step)
        g = float(flat_g[idx])
        dev = abs(g - fd) / max(abs(g), abs(fd), floor)
        if not math.isfinite(dev):
            dev = math.inf
        worst = max(worst, dev)
        records.append((int(idx), g, fd, dev))
    return GradientReport(worst, tolerance, worst <= tolerance, records)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 70
    learning_rate: float = 0.01
    momentum: float = 0.99
    batch_size: int = 8
    seed: int = 0
    noise_fraction: float = 0.0  # opt-in noisy training inputs

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be positive and epochs non-negative")

    def to_dict(self):
        return asdict(self)


def set_deterministic(threads: int = 1):
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def train(dataset, F: SvdFactors, policy: TruncationPolicy, config: TrainConfig = TrainConfig(),
          params: NetworkParams | None = None, descriptor: dict | None = None):
    """SGD with heavy-ball momentum on ``mean |x_n - R A x_n|^2``.

    ``velocity <- momentum * velocity - lr * grad``; ``weights <- weights + velocity``.
    Returns ``(params, losses)`` where ``losses[0]`` is the training loss before
    the first update and ``losses[e]`` the loss after epoch ``e`` (full
    training set, fixed order).
    """
    role = getattr(dataset, "role", "train")
    if role != "train":
        raise ValueError(f"training requires a dataset with role 'train', got {role!r}")
    if getattr(dataset, "noise_fraction", 0.0) != 0.0:
        raise ValueError("training data must be noise-free")
    X = np.asarray(dataset.X, dtype=float)
    Y = np.asarray(dataset.Y, dtype=float)
    size = int(round(math.sqrt(X.shape[1])))
    if params is None:
        params = make_params(F, policy, size, descriptor, config.seed)
    net = params.network
    proj = _Projector(F, policy)
    Xt = torch.from_numpy(X)
    Bclean = torch.from_numpy(tsvd_apply(F, policy, Y))
    rng = np.random.default_rng(config.seed)
    velocity = [torch.zeros_like(p) for p in net.parameters()]

    def full_loss():
        with torch.no_grad():
            total = 0.0
            for s in range(0, len(X), 64):
                total += float(_batch_loss(params, proj, Bclean[s:s + 64], Xt[s:s + 64]).sum())
            return total / len(X)

    losses = [full_loss()]
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        if config.noise_fraction > 0:
            std = config.noise_fraction * Y.max(axis=1, keepdims=True)
            B = torch.from_numpy(tsvd_apply(F, policy, Y + rng.standard_normal(Y.shape) * std))
        else:
            B = Bclean
        for b, start in enumerate(range(0, len(X), config.batch_size)):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            net.zero_grad(set_to_none=True)
            per = _batch_loss(params, proj, B[idx], Xt[idx])
            loss = per.mean()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            with torch.no_grad():
                for p, v in zip(net.parameters(), velocity):
                    v.mul_(config.momentum).sub_(config.learning_rate * p.grad)
                    p.add_(v)
        losses.append(full_loss())
        if not math.isfinite(losses[-1]):
            raise TrainingDivergedError(f"non-finite training loss after epoch {epoch}")
        log.info("epoch %d loss %.6g", epoch + 1, losses[-1])
    return params, losses
