"""
Models Module

The two networks optimized by the solver and the losses tying them to the
LR observation.

    KernelGenerator  G_k: fixed noise z_k -> FCN -> softmax -> (4s+3)² kernel
    ImageRestorer    G_x: fixed noise z_x -> skip encoder-decoder -> sigmoid -> HR image

Neither network is pretrained; both are fit to a single LR image. The softmax
head makes every generated kernel positive with unit sum, and the sigmoid
head keeps every generated pixel inside (0, 1).
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from src.degradation import reconstruction_residual
from src.tensor_ad import Tensor, forward_op

logger = logging.getLogger(__name__)

# Floor applied to the noise-variance estimate before it divides the data term
SIGMA2_FLOOR = 1e-6

# Forward-difference gradient filters [1, -1] and [1, -1]ᵀ as [O, C, kh, kw] weights
_GRADIENT_FILTERS = (
    np.array([[[[1.0, -1.0]]]]),
    np.array([[[[1.0], [-1.0]]]]),
)


def _uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, name: str) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def count_parameters(params: Dict[str, Tensor]) -> int:
    """Total number of scalar parameters."""
    return int(sum(p.size for p in params.values()))


# =============================================================================
# Parameter serialization
# =============================================================================

def save_parameters(tensors: Dict[str, Tensor], path: Union[str, Path]) -> Tuple[Path, Path]:
    """
    Write tensors as one little-endian float64 blob plus a text shape manifest.

    The blob goes to `<path>.bin`; the manifest `<path>.txt` has one line per
    tensor: `name d1 d2 ...`, in blob order.

    Returns:
        (blob path, manifest path)
    """
    path = Path(path)
    blob_path, manifest_path = path.with_suffix(".bin"), path.with_suffix(".txt")
    blob_path.parent.mkdir(parents=True, exist_ok=True)
    with open(blob_path, "wb") as f:
        for tensor in tensors.values():
            f.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    lines = [" ".join([name] + [str(d) for d in tensor.shape]) for name, tensor in tensors.items()]
    manifest_path.write_text("\n".join(lines) + "\n")
    return blob_path, manifest_path


def load_parameters(tensors: Dict[str, Tensor], path: Union[str, Path]) -> None:
    """
    Fill `tensors` in place from a blob written by `save_parameters`.

    Raises:
        ValueError: Manifest names/shapes differ from `tensors`, or the blob size is wrong.
    """
    path = Path(path)
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    entries = [line.split() for line in path.with_suffix(".txt").read_text().splitlines() if line.strip()]

    expected = [(name, list(t.shape)) for name, t in tensors.items()]
    found = [(e[0], [int(d) for d in e[1:]]) for e in entries]
    if found != expected:
        raise ValueError(f"Parameter manifest {path.with_suffix('.txt')} does not match the model layout")

    offset = 0
    for tensor in tensors.values():
        chunk = raw[offset:offset + tensor.size]
        if chunk.size != tensor.size:
            raise ValueError(f"Parameter blob {path.with_suffix('.bin')} is truncated")
        tensor.data = chunk.astype(np.float64).reshape(tensor.shape)
        offset += tensor.size
    if offset != raw.size:
        raise ValueError(f"Parameter blob {path.with_suffix('.bin')} has {raw.size - offset} trailing values")


# =============================================================================
# Kernel generator
# =============================================================================

class KernelGenerator:
    """
    Shallow fully connected kernel generator.

    z_k (1×z_dim, frozen) -> linear(hidden) -> leaky ReLU -> linear(side²) -> softmax -> side×side

    Args:
        side: Kernel grid side (4s+3 for scale s).
        rng: Generator used for z_k and the initial weights.
        z_dim: Length of the fixed input vector.
        hidden: Width of the hidden layer.
        slope: Leaky ReLU negative slope.
    """

    def __init__(
        self,
        side: int,
        rng: np.random.Generator,
        z_dim: int = 64,
        hidden: int = 1000,
        slope: float = 0.1,
    ):
        self.side = side
        self.slope = slope
        self.z = Tensor(rng.uniform(0.0, 1.0, size=(1, z_dim)), name="z_k")
        self.params: Dict[str, Tensor] = {
            "fc1.weight": _uniform_init(rng, (z_dim, hidden), z_dim, "fc1.weight"),
            "fc1.bias": _uniform_init(rng, (hidden,), z_dim, "fc1.bias"),
            "fc2.weight": _uniform_init(rng, (hidden, side * side), hidden, "fc2.weight"),
            "fc2.bias": _uniform_init(rng, (side * side,), hidden, "fc2.bias"),
        }

    def _logits(self) -> Tensor:
        p = self.params
        h = forward_op("leaky_relu", [self.z @ p["fc1.weight"] + p["fc1.bias"]], slope=self.slope)
        return h @ p["fc2.weight"] + p["fc2.bias"]

    def forward(self) -> Tensor:
        """Differentiable kernel tensor of shape [side, side]."""
        return forward_op("softmax", [self._logits()]).reshape(self.side, self.side)

    def logits(self) -> np.ndarray:
        """Pre-softmax scores, flattened (side² values)."""
        return self._logits().numpy().ravel()

    def kernel(self) -> np.ndarray:
        """Current kernel as a plain array."""
        return self.forward().numpy()

    def state_tensors(self) -> Dict[str, Tensor]:
        return {"z_k": self.z, **self.params}

    def save(self, path: Union[str, Path]) -> Tuple[Path, Path]:
        return save_parameters(self.state_tensors(), path)

    def load(self, path: Union[str, Path]) -> None:
        load_parameters(self.state_tensors(), path)


def kernel_forward(g: KernelGenerator) -> np.ndarray:
    """k = G_k(z_k, φ_k) as a plain array."""
    return g.kernel()


# =============================================================================
# Image restorer
# =============================================================================

class ImageRestorer:
    """
    Deep-image-prior style encoder-decoder with skip connections.

    For each level i (resolution H/2^i):
        skip_i = lrelu(conv1x1(h_i))                          -> skip_channels
        h_{i+1} = lrelu(conv3x3(lrelu(conv3x3/stride2(h_i)))) -> channels
    Decoder, deepest first:
        u = lrelu(conv1x1(lrelu(conv3x3(concat(upsample(u), skip_i)))))
    Output: sigmoid(conv1x1(u)) with `image_channels` channels.

    Internal convolutions use zero padding.

    Args:
        hr_shape: (H, W) of the HR image; both divisible by 2^depth.
        image_channels: 1 or 3.
        rng: Generator used for z_x and the initial weights.
        depth, channels, skip_channels, z_channels, slope: Architecture.

    Raises:
        ValueError: H or W not divisible by 2^depth.
    """

    def __init__(
        self,
        hr_shape: Tuple[int, int],
        image_channels: int,
        rng: np.random.Generator,
        depth: int = 3,
        channels: int = 32,
        skip_channels: int = 4,
        z_channels: int = 16,
        slope: float = 0.1,
    ):
        height, width = hr_shape
        multiple = 2 ** depth
        if height % multiple or width % multiple:
            target = (-(-height // multiple) * multiple, -(-width // multiple) * multiple)
            raise ValueError(
                f"HR size {height}×{width} is not divisible by 2^depth = {multiple}; "
                f"pad or crop to a multiple of {multiple} (e.g. {target[0]}×{target[1]})"
            )

        self.hr_shape = (height, width)
        self.image_channels = image_channels
        self.depth = depth
        self.slope = slope
        self.z = Tensor(rng.uniform(0.0, 0.1, size=(1, z_channels, height, width)), name="z_x")
        self.params: Dict[str, Tensor] = {}

        in_ch = z_channels
        for i in range(depth):
            self._add_conv(rng, f"skip{i}", in_ch, skip_channels, 1)
            self._add_conv(rng, f"down{i}.conv1", in_ch, channels, 3)
            self._add_conv(rng, f"down{i}.conv2", channels, channels, 3)
            in_ch = channels
        for i in reversed(range(depth)):
            self._add_conv(rng, f"up{i}.conv1", channels + skip_channels, channels, 3)
            self._add_conv(rng, f"up{i}.conv2", channels, channels, 1)
        self._add_conv(rng, "out", channels, image_channels, 1)

    def _add_conv(self, rng: np.random.Generator, name: str, c_in: int, c_out: int, k: int) -> None:
        fan_in = c_in * k * k
        self.params[f"{name}.weight"] = _uniform_init(rng, (c_out, c_in, k, k), fan_in, f"{name}.weight")
        self.params[f"{name}.bias"] = _uniform_init(rng, (c_out,), fan_in, f"{name}.bias")

    def _conv(self, name: str, x: Tensor, stride: int = 1, act: bool = True) -> Tensor:
        out = forward_op(
            "conv2d",
            [x, self.params[f"{name}.weight"], self.params[f"{name}.bias"]],
            stride=stride,
            padding="zero",
        )
        return forward_op("leaky_relu", [out], slope=self.slope) if act else out

    def forward(self) -> Tensor:
        """Differentiable HR image tensor of shape [1, C, H, W]."""
        skips: List[Tensor] = []
        h = self.z
        for i in range(self.depth):
            skips.append(self._conv(f"skip{i}", h))
            h = self._conv(f"down{i}.conv2", self._conv(f"down{i}.conv1", h, stride=2))
        u = h
        for i in reversed(range(self.depth)):
            u = forward_op("upsample_nearest", [u], factor=2)
            u = forward_op("concat", [u, skips[i]])
            u = self._conv(f"up{i}.conv2", self._conv(f"up{i}.conv1", u))
        return forward_op("sigmoid", [self._conv("out", u, act=False)])

    def image(self) -> np.ndarray:
        """Current HR estimate as an (H, W, C) array."""
        return tensor_to_image(self.forward())

    def state_tensors(self) -> Dict[str, Tensor]:
        return {"z_x": self.z, **self.params}

    def save(self, path: Union[str, Path]) -> Tuple[Path, Path]:
        return save_parameters(self.state_tensors(), path)

    def load(self, path: Union[str, Path]) -> None:
        load_parameters(self.state_tensors(), path)


def image_forward(g: ImageRestorer) -> np.ndarray:
    """x = G_x(z_x, φ_x) as an (H, W, C) array."""
    return g.image()


def tensor_to_image(x: Tensor) -> np.ndarray:
    """[1, C, H, W] tensor -> (H, W, C) array."""
    return x.data[0].transpose(1, 2, 0).copy()


def image_to_tensor(image: np.ndarray) -> Tensor:
    """(H, W, C) array -> constant [1, C, H, W] tensor."""
    return Tensor(np.asarray(image, dtype=np.float64).transpose(2, 0, 1)[None])


# =============================================================================
# Losses
# =============================================================================

def degrade_tensor(x: Tensor, k: Tensor, s: int) -> Tensor:
    """
    Differentiable (x ⊗ k)↓s for x of shape [1, C, H, W] and k of shape [K, K].

    Channels are folded into the batch axis so one shared kernel blurs them
    all; reflect padding plus stride s matches `degradation.degrade` without noise.

    Returns:
        Tensor of shape [C, 1, ceil(H/s), ceil(W/s)].
    """
    _, c, h, w = x.shape
    side = k.shape[0]
    return forward_op(
        "conv2d",
        [x.reshape(c, 1, h, w), k.reshape(1, 1, side, side)],
        stride=s,
        padding="reflect",
    )


def _lr_target(y: np.ndarray) -> Tensor:
    return Tensor(np.asarray(y, dtype=np.float64).transpose(2, 0, 1)[:, None])


def reconstruction_loss(x: Tensor, y: np.ndarray, k: Tensor, s: int) -> Tensor:
    """‖y − (x ⊗ k)↓s‖²_F as a differentiable scalar."""
    return forward_op("sq_frobenius", [degrade_tensor(x, k, s) - _lr_target(y)])


def hyper_laplacian_loss(
    x: Tensor,
    y: np.ndarray,
    k: Tensor,
    s: int,
    sigma2: float,
    rho_reg: float,
    eta: float,
) -> Tensor:
    """
    Noise-aware reconstruction loss with a hyper-Laplacian gradient prior.

        L = (1/σ²)·‖y − (x ⊗ k)↓s‖²_F + ρ·Σ_c (‖f_c ⊗ x‖²_F)^η

    with f_c the horizontal and vertical forward-difference filters.

    Args:
        x: HR image tensor [1, C, H, W].
        y: LR observation (h, w, C).
        k: Kernel tensor [K, K].
        s: Scale factor.
        sigma2: Noise variance estimate (floored at 1e-6).
        rho_reg: Prior weight ρ >= 0; 0 leaves only the data term.
        eta: Prior exponent in (0, 1].

    Returns:
        Tensor: Scalar loss of shape [1].
    """
    if not 0 < eta <= 1:
        raise ValueError(f"hyper-Laplacian exponent eta must be in (0, 1], got {eta}")
    if rho_reg < 0:
        raise ValueError(f"rho_reg must be >= 0, got {rho_reg}")

    sigma2 = max(float(sigma2), SIGMA2_FLOOR)
    loss = reconstruction_loss(x, y, k, s) * (1.0 / sigma2)
    if rho_reg == 0:
        return loss

    _, c, h, w = x.shape
    channels = x.reshape(c, 1, h, w)
    prior = None
    for f in _GRADIENT_FILTERS:
        energy = forward_op("sq_frobenius", [forward_op("conv2d", [channels, Tensor(f)], padding="valid")])
        term = forward_op("power", [energy], exponent=eta)
        prior = term if prior is None else prior + term
    return loss + prior * rho_reg


def estimate_noise_variance(y: np.ndarray, x: np.ndarray, k: np.ndarray, s: int) -> float:
    """
    σ² = mean over LR pixels and channels of (y − (x ⊗ k)↓s)², floored at 1e-6.
    """
    residual = reconstruction_residual(y, x, k, s)
    return max(float(np.mean(residual ** 2)), SIGMA2_FLOOR)
