"""Reference convolutional autoencoders and their optimizer.

Two architectures are provided. ``digit-ae`` consumes 28x28 grayscale
images: two 5x5 conv blocks (4 then 8 filters, each batch norm + leaky
ReLU + 2x2 max pool) into a 32-dimensional dense latent; the decoder
mirrors it with nearest-neighbour upsampling, transposed 5x5 convolutions
(8, 4, then 1 filter) and a final sigmoid. ``patch-ae`` consumes 15x15
patches: a 5x5 conv (3 filters) then three 3x3 convs (4, 12, 16 filters),
all batch norm + GELU and without pooling, into a dense latent (16 by
default); mirrored decoder ending in a 5x5 transposed conv + sigmoid.

Parameters are float64 graph tensors initialized with seeded fan-in
uniform draws. Checkpoints are a little-endian binary container with
magic bytes "OGAE" holding the flat parameter vector and the batch-norm
running statistics in declared layer order.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataFormatError, ShapeError, UsageError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"OGAE"
CHECKPOINT_VERSION = 1

ARCHITECTURES = ("digit-ae", "patch-ae")
_DEFAULT_LATENT = {"digit-ae": 32, "patch-ae": 16}
_INPUT_HW = {"digit-ae": 28, "patch-ae": 15}


@dataclass(frozen=True)
class AutoencoderSpec:
    """Architecture id, latent width and the parameter-init seed."""

    architecture: str
    latent_dim: int = 0  # 0 selects the architecture default
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise UsageError(
                f"unknown architecture {self.architecture!r}, expected one of {ARCHITECTURES}"
            )
        if self.latent_dim == 0:
            object.__setattr__(self, "latent_dim", _DEFAULT_LATENT[self.architecture])
        if self.latent_dim < 1:
            raise UsageError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.seed < 0:
            raise UsageError(f"seed must be >= 0, got {self.seed}")

    @property
    def input_hw(self) -> int:
        return _INPUT_HW[self.architecture]


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Autoencoder:
    """Encoder/decoder pair over the minimal autodiff engine.

    Parameters live in ``self.params`` (ordered name -> Tensor); batch-norm
    running statistics in ``self.stats`` (name -> array, updated in place
    during training-mode forward passes and frozen for inference).
    """

    def __init__(self, spec: AutoencoderSpec):
        self.spec = spec
        self.params: dict[str, ad.Tensor] = {}
        self.stats: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(spec.seed)
        if spec.architecture == "digit-ae":
            self._build_digit(rng)
        else:
            self._build_patch(rng)

    # -- construction -----------------------------------------------------

    def _add_conv(self, rng, name: str, cin: int, cout: int, k: int) -> None:
        self.params[f"{name}.w"] = ad.Tensor(
            _uniform_init(rng, (cout, cin, k, k), cin * k * k), requires_grad=True
        )
        self.params[f"{name}.b"] = ad.Tensor(np.zeros(cout), requires_grad=True)

    def _add_tconv(self, rng, name: str, cin: int, cout: int, k: int) -> None:
        # Transposed-conv weights are (cin, cout, k, k); fan-in counts the
        # contributing input elements per output, cin * k * k.
        self.params[f"{name}.w"] = ad.Tensor(
            _uniform_init(rng, (cin, cout, k, k), cin * k * k), requires_grad=True
        )
        self.params[f"{name}.b"] = ad.Tensor(np.zeros(cout), requires_grad=True)

    def _add_bn(self, name: str, channels: int) -> None:
        self.params[f"{name}.gamma"] = ad.Tensor(np.ones(channels), requires_grad=True)
        self.params[f"{name}.beta"] = ad.Tensor(np.zeros(channels), requires_grad=True)
        self.stats[f"{name}.mean"] = np.zeros(channels)
        self.stats[f"{name}.var"] = np.ones(channels)

    def _add_dense(self, rng, name: str, din: int, dout: int) -> None:
        self.params[f"{name}.w"] = ad.Tensor(_uniform_init(rng, (din, dout), din), requires_grad=True)
        self.params[f"{name}.b"] = ad.Tensor(np.zeros(dout), requires_grad=True)

    def _build_digit(self, rng) -> None:
        d = self.spec.latent_dim
        self._add_conv(rng, "enc1", 1, 4, 5)
        self._add_bn("enc1.bn", 4)
        self._add_conv(rng, "enc2", 4, 8, 5)
        self._add_bn("enc2.bn", 8)
        self._add_dense(rng, "enc_fc", 8 * 7 * 7, d)
        self._add_dense(rng, "dec_fc", d, 8 * 7 * 7)
        self._add_tconv(rng, "dec1", 8, 8, 5)
        self._add_bn("dec1.bn", 8)
        self._add_tconv(rng, "dec2", 8, 4, 5)
        self._add_bn("dec2.bn", 4)
        self._add_tconv(rng, "dec3", 4, 1, 5)

    def _build_patch(self, rng) -> None:
        d = self.spec.latent_dim
        self._add_conv(rng, "enc1", 1, 3, 5)
        self._add_bn("enc1.bn", 3)
        self._add_conv(rng, "enc2", 3, 4, 3)
        self._add_bn("enc2.bn", 4)
        self._add_conv(rng, "enc3", 4, 12, 3)
        self._add_bn("enc3.bn", 12)
        self._add_conv(rng, "enc4", 12, 16, 3)
        self._add_bn("enc4.bn", 16)
        self._add_dense(rng, "enc_fc", 16 * 15 * 15, d)
        self._add_dense(rng, "dec_fc", d, 16 * 15 * 15)
        self._add_tconv(rng, "dec1", 16, 12, 3)
        self._add_bn("dec1.bn", 12)
        self._add_tconv(rng, "dec2", 12, 4, 3)
        self._add_bn("dec2.bn", 4)
        self._add_tconv(rng, "dec3", 4, 3, 3)
        self._add_bn("dec3.bn", 3)
        self._add_tconv(rng, "dec4", 3, 1, 5)

    # -- forward passes ----------------------------------------------------

    def _bn(self, name: str, h: ad.Tensor, training: bool) -> ad.Tensor:
        return ad.batch_norm(
            h,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.stats[f"{name}.mean"],
            self.stats[f"{name}.var"],
            training=training,
        )

    def _check_input(self, x: ad.Tensor) -> None:
        hw = self.spec.input_hw
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != hw or x.shape[3] != hw:
            raise ShapeError(
                f"{self.spec.architecture} expects (N, 1, {hw}, {hw}) input, got {x.shape}"
            )

    def encode(self, x: ad.Tensor, training: bool = False) -> ad.Tensor:
        self._check_input(x)
        p = self.params
        if self.spec.architecture == "digit-ae":
            h = ad.conv2d(x, p["enc1.w"], p["enc1.b"], padding=2)
            h = ad.leaky_relu(self._bn("enc1.bn", h, training))
            h = ad.max_pool2(h)
            h = ad.conv2d(h, p["enc2.w"], p["enc2.b"], padding=2)
            h = ad.leaky_relu(self._bn("enc2.bn", h, training))
            h = ad.max_pool2(h)
            h = ad.reshape(h, (x.shape[0], 8 * 7 * 7))
        else:
            h = ad.conv2d(x, p["enc1.w"], p["enc1.b"], padding=2)
            h = ad.gelu(self._bn("enc1.bn", h, training))
            h = ad.conv2d(h, p["enc2.w"], p["enc2.b"], padding=1)
            h = ad.gelu(self._bn("enc2.bn", h, training))
            h = ad.conv2d(h, p["enc3.w"], p["enc3.b"], padding=1)
            h = ad.gelu(self._bn("enc3.bn", h, training))
            h = ad.conv2d(h, p["enc4.w"], p["enc4.b"], padding=1)
            h = ad.gelu(self._bn("enc4.bn", h, training))
            h = ad.reshape(h, (x.shape[0], 16 * 15 * 15))
        return h @ p["enc_fc.w"] + p["enc_fc.b"]

    def decode(self, z: ad.Tensor, training: bool = False) -> ad.Tensor:
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ShapeError(f"expected (N, {self.spec.latent_dim}) latents, got {z.shape}")
        p = self.params
        n = z.shape[0]
        h = z @ p["dec_fc.w"] + p["dec_fc.b"]
        if self.spec.architecture == "digit-ae":
            h = ad.reshape(h, (n, 8, 7, 7))
            h = ad.upsample2(h)
            h = ad.conv2d_transpose(h, p["dec1.w"], p["dec1.b"], padding=2)
            h = ad.leaky_relu(self._bn("dec1.bn", h, training))
            h = ad.upsample2(h)
            h = ad.conv2d_transpose(h, p["dec2.w"], p["dec2.b"], padding=2)
            h = ad.leaky_relu(self._bn("dec2.bn", h, training))
            h = ad.conv2d_transpose(h, p["dec3.w"], p["dec3.b"], padding=2)
        else:
            h = ad.reshape(h, (n, 16, 15, 15))
            h = ad.conv2d_transpose(h, p["dec1.w"], p["dec1.b"], padding=1)
            h = ad.gelu(self._bn("dec1.bn", h, training))
            h = ad.conv2d_transpose(h, p["dec2.w"], p["dec2.b"], padding=1)
            h = ad.gelu(self._bn("dec2.bn", h, training))
            h = ad.conv2d_transpose(h, p["dec3.w"], p["dec3.b"], padding=1)
            h = ad.gelu(self._bn("dec3.bn", h, training))
            h = ad.conv2d_transpose(h, p["dec4.w"], p["dec4.b"], padding=2)
        return ad.sigmoid(h)

    def forward(self, x: ad.Tensor, training: bool = False) -> tuple[ad.Tensor, ad.Tensor]:
        z = self.encode(x, training=training)
        return z, self.decode(z, training=training)

    # -- parameter plumbing ------------------------------------------------

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def encode_array(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        """Inference-mode encoding of a plain array, in batches."""
        out = []
        for i in range(0, x.shape[0], batch):
            out.append(self.encode(ad.Tensor(x[i : i + batch])).data)
        return np.concatenate(out, axis=0)

    def clone_state(self) -> dict:
        return {
            "params": {k: v.data.copy() for k, v in self.params.items()},
            "stats": {k: v.copy() for k, v in self.stats.items()},
        }

    def restore_state(self, state: dict) -> None:
        for k, v in state["params"].items():
            self.params[k].data = v.copy()
        for k, v in state["stats"].items():
            self.stats[k][...] = v

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def flat_stats(self) -> np.ndarray:
        if not self.stats:
            return np.zeros(0)
        return np.concatenate([s.reshape(-1) for s in self.stats.values()])

    def load_flat(self, params: np.ndarray, stats: np.ndarray) -> None:
        if params.size != self.parameter_count:
            raise DataFormatError(
                f"parameter vector has {params.size} entries, model needs {self.parameter_count}"
            )
        off = 0
        for p in self.params.values():
            p.data = params[off : off + p.size].reshape(p.shape).copy()
            off += p.size
        expected_stats = sum(s.size for s in self.stats.values())
        if stats.size != expected_stats:
            raise DataFormatError(
                f"stats vector has {stats.size} entries, model needs {expected_stats}"
            )
        off = 0
        for s in self.stats.values():
            s[...] = stats[off : off + s.size].reshape(s.shape)
            off += s.size


def reconstruction_loss(x: ad.Tensor, x_hat: ad.Tensor) -> ad.Tensor:
    """Sum over the batch of squared L2 reconstruction errors."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {x_hat.shape}")
    return ad.tsum(ad.square(x - x_hat))


class Adam:
    """Adam with bias correction; state arrays match parameter order."""

    def __init__(self, params: list[ad.Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0.0:
            raise UsageError(f"learning rate must be > 0, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def save_checkpoint(model: Autoencoder, path: str | Path) -> None:
    """Write the binary container: header, parameters, batch-norm stats."""
    arch = model.spec.architecture.encode("utf-8")
    params = np.ascontiguousarray(model.flat_parameters(), dtype="<f8")
    stats = np.ascontiguousarray(model.flat_stats(), dtype="<f8")
    header = CHECKPOINT_MAGIC + struct.pack(
        "<IIIQQQ",
        CHECKPOINT_VERSION,
        len(arch),
        model.spec.latent_dim,
        model.spec.seed,
        params.size,
        stats.size,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arch)
        fh.write(params.tobytes())
        fh.write(stats.tobytes())


def load_checkpoint(path: str | Path) -> Autoencoder:
    """Read a checkpoint container and rebuild the model it describes."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: missing checkpoint magic bytes")
    fixed = struct.calcsize("<IIIQQQ")
    if len(blob) < 4 + fixed:
        raise DataFormatError(f"{path}: truncated checkpoint header")
    version, arch_len, latent_dim, seed, n_params, n_stats = struct.unpack(
        "<IIIQQQ", blob[4 : 4 + fixed]
    )
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + fixed
    arch = blob[off : off + arch_len].decode("utf-8")
    off += arch_len
    need = off + 8 * (n_params + n_stats)
    if len(blob) < need:
        raise DataFormatError(f"{path}: truncated checkpoint payload ({len(blob)} < {need} bytes)")
    params = np.frombuffer(blob, dtype="<f8", count=n_params, offset=off).astype(np.float64)
    stats = np.frombuffer(blob, dtype="<f8", count=n_stats, offset=off + 8 * n_params).astype(
        np.float64
    )
    model = Autoencoder(AutoencoderSpec(architecture=arch, latent_dim=latent_dim, seed=seed))
    model.load_flat(params, stats)
    return model
