"""Latent generative model of unit cells with a stiffness regression head.

A convolutional encoder maps a binary cell to a diagonal Gaussian posterior
over a compact latent code; the decoder maps codes back to pixel
probabilities; a small dense head predicts standardized stiffness components
from the posterior mean. All three train jointly: Bernoulli reconstruction
cross entropy, the closed-form Gaussian divergence from the unit prior, and
the Euclidean property residual. Decoder sampling uses the usual
location-scale rewrite so gradients pass through the noise.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import FileFormatError, TrainingDiverged, ValidationError
from .homogenization import PropertyStandardizer, StiffnessComponents
from .microstructure import DensityField, Microstructure, repair, symmetrize, threshold

WEIGHTS_MAGIC = "#metaweights"
WEIGHTS_VERSION = "v1"


@dataclass(frozen=True)
class ModelConfig:
    grid_shape: tuple[int, int] = (50, 50)
    latent_dim: int = 16
    enc_channels: tuple[int, ...] = (8, 16, 32)
    dec_channels: tuple[int, int] = (16, 8)
    reg_hidden: tuple[int, int] = (64, 64)

    def __post_init__(self):
        h, w = self.grid_shape
        if h % 2 or w % 2:
            raise ValidationError("grid dimensions must be even")
        if len(self.enc_channels) != 3 or len(self.dec_channels) != 2:
            raise ValidationError("expected 3 encoder and 2 decoder channel counts")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 100  # paper-scale runs use 500
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "rmsprop"
    regression_weight: float = 1.0
    mc_samples: int = 1
    validation_fraction: float = 0.1
    rng_seed: int = 0
    torch_threads: int = 1


@dataclass(frozen=True)
class PosteriorParams:
    """Diagonal Gaussian over latent codes."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ValidationError("mean and std shapes differ")
        if not (self.std > 0).all():
            raise ValidationError("posterior std must be positive")


def reparameterize(post: PosteriorParams, noise: np.ndarray) -> np.ndarray:
    """Location-scale sample: mean + std * noise."""
    return post.mean + post.std * np.asarray(noise)


def kl_divergence(mean, std) -> float:
    """Divergence of N(mean, diag std^2) from the unit Gaussian, summed over
    latent entries and averaged over leading batch rows if present."""
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    std = np.atleast_2d(np.asarray(std, dtype=float))
    if (std <= 0).any():
        raise ValidationError("std must be positive")
    per_row = 0.5 * (std**2 + mean**2 - 1.0 - 2.0 * np.log(std)).sum(axis=1)
    return float(per_row.mean())


def bernoulli_ce(x, probs) -> float:
    """Pixel cross entropy, summed per sample, averaged over the batch."""
    x = np.atleast_3d(np.asarray(x, dtype=float))
    p = np.clip(np.atleast_3d(np.asarray(probs, dtype=float)), 1e-7, 1.0 - 1e-7)
    per = -(x * np.log(p) + (1 - x) * np.log(1 - p)).reshape(x.shape[0], -1).sum(axis=1)
    return float(per.mean())


def regression_residual(pred_std, label_std) -> float:
    """Euclidean norm of the standardized property error, batch averaged."""
    d = np.atleast_2d(np.asarray(pred_std, dtype=float) - np.asarray(label_std, dtype=float))
    return float(np.linalg.norm(d, axis=1).mean())


def joint_loss(x, probs, post: PosteriorParams, pred_std, label_std, regression_weight=1.0) -> dict:
    """Reference-path loss terms on numpy inputs; the training loop computes
    the same quantities on the stable logits path."""
    terms = {
        "recon": bernoulli_ce(x, probs),
        "kl": kl_divergence(post.mean, post.std),
        "reg": regression_residual(pred_std, label_std),
    }
    terms["total"] = terms["recon"] + terms["kl"] + regression_weight * terms["reg"]
    return terms


def _conv_out(n: int) -> int:
    # kernel 3, stride 2, padding 1
    return (n - 1) // 2 + 1


class LatentModel(nn.Module):
    """Encoder / decoder / property head triple over binary cells."""

    def __init__(self, config: ModelConfig, label_standardizer: PropertyStandardizer):
        super().__init__()
        self.config = config
        self.label_standardizer = label_standardizer
        h, w = config.grid_shape
        j = config.latent_dim
        c1, c2, c3 = config.enc_channels
        self.enc_conv = nn.Sequential(
            nn.Conv2d(1, c1, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.ReLU(),
        )
        eh, ew = h, w
        for _ in range(3):
            eh, ew = _conv_out(eh), _conv_out(ew)
        self.enc_fc = nn.Linear(c3 * eh * ew, 2 * j)

        d1, d2 = config.dec_channels
        # two doublings reach 4*ceil(n/4); the last conv trims 4k+2 sizes
        self._dec_h0 = (h + 3) // 4
        self._dec_w0 = (w + 3) // 4
        pad_h = 1 if 4 * self._dec_h0 == h else 0
        pad_w = 1 if 4 * self._dec_w0 == w else 0
        self.dec_fc = nn.Linear(j, d1 * self._dec_h0 * self._dec_w0)
        self.dec_conv = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(d1, d2, 3, padding=1), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(d2, d2, 3, padding=1), nn.ReLU(),
            nn.Conv2d(d2, 1, 3, padding=(pad_h, pad_w)),
        )

        r1, r2 = config.reg_hidden
        self.regressor = nn.Sequential(
            nn.Linear(j, r1), nn.Tanh(), nn.Linear(r1, r2), nn.Tanh(), nn.Linear(r2, 4)
        )

    # --- torch-side pieces ----------------------------------------------

    def posterior(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.enc_fc(self.enc_conv(x).flatten(1))
        mu, logvar = out.chunk(2, dim=1)
        return mu, logvar

    def decode_logits(self, z: torch.Tensor) -> torch.Tensor:
        d1 = self.config.dec_channels[0]
        grid = self.dec_fc(z).view(-1, d1, self._dec_h0, self._dec_w0)
        return self.dec_conv(grid)

    def training_loss(self, x, labels_std, noise, regression_weight=1.0):
        """Stable-path loss terms; noise has shape (mc, batch, latent)."""
        mu, logvar = self.posterior(x)
        recon = x.new_zeros(())
        for s in range(noise.shape[0]):
            z = mu + torch.exp(0.5 * logvar) * noise[s]
            logits = self.decode_logits(z)
            recon = recon + F.binary_cross_entropy_with_logits(
                logits, x, reduction="none"
            ).flatten(1).sum(1).mean()
        recon = recon / noise.shape[0]
        kl = (0.5 * (torch.exp(logvar) + mu * mu - 1.0 - logvar).sum(1)).mean()
        pred = self.regressor(mu)  # property head reads the mean, not the sample
        reg = torch.linalg.vector_norm(pred - labels_std, dim=1).mean()
        total = recon + kl + regression_weight * reg
        return {"recon": recon, "kl": kl, "reg": reg, "total": total}

    # --- numpy-facing API ------------------------------------------------

    def _as_input(self, m: Microstructure) -> torch.Tensor:
        if m.shape != self.config.grid_shape:
            raise ValidationError(f"cell shape {m.shape} != model {self.config.grid_shape}")
        p = next(self.parameters())
        return torch.as_tensor(m.cells, dtype=p.dtype).reshape(1, 1, *m.shape)

    @torch.no_grad()
    def encode(self, m: Microstructure) -> PosteriorParams:
        self.eval()
        mu, logvar = self.posterior(self._as_input(m))
        return PosteriorParams(
            mean=mu[0].double().numpy().copy(),
            std=torch.exp(0.5 * logvar[0]).double().numpy().copy(),
        )

    @torch.no_grad()
    def encode_batch(self, cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self.eval()
        p = next(self.parameters())
        x = torch.as_tensor(np.asarray(cells), dtype=p.dtype).unsqueeze(1)
        mu, logvar = self.posterior(x)
        return mu.double().numpy().copy(), torch.exp(0.5 * logvar).double().numpy().copy()

    @torch.no_grad()
    def decode(self, z: np.ndarray) -> DensityField:
        self.eval()
        p = next(self.parameters())
        zt = torch.as_tensor(np.asarray(z), dtype=p.dtype).reshape(1, self.config.latent_dim)
        probs = torch.sigmoid(self.decode_logits(zt))
        return probs[0, 0].double().numpy().copy()

    @torch.no_grad()
    def predict_properties(self, z_mean: np.ndarray) -> StiffnessComponents:
        self.eval()
        p = next(self.parameters())
        zt = torch.as_tensor(np.asarray(z_mean), dtype=p.dtype).reshape(1, self.config.latent_dim)
        out = self.regressor(zt)[0].double().numpy()
        return StiffnessComponents.from_array(self.label_standardizer.inverse(out))

    def reconstruct(self, m: Microstructure, cut: float = 0.9) -> Microstructure:
        return postprocess_density(self.decode(self.encode(m).mean), cut)

    # --- persistence ------------------------------------------------------

    def save_weights(self, path) -> None:
        cfg = self.config
        state = self.state_dict()
        blob = io.BytesIO()
        names = []
        for name, tensor in state.items():
            arr = tensor.detach().double().numpy()
            blob.write(arr.astype("<f8").tobytes())
            names.append((name, arr.shape))
        data = blob.getvalue()
        lines = [
            f"{WEIGHTS_MAGIC} {WEIGHTS_VERSION}",
            f"latent_dim {cfg.latent_dim}",
            f"grid {cfg.grid_shape[0]} {cfg.grid_shape[1]}",
            "enc_channels " + ",".join(map(str, cfg.enc_channels)),
            "dec_channels " + ",".join(map(str, cfg.dec_channels)),
            "reg_hidden " + ",".join(map(str, cfg.reg_hidden)),
            "label_mean " + ",".join(repr(float(v)) for v in self.label_standardizer.mean),
            "label_std " + ",".join(repr(float(v)) for v in self.label_standardizer.std),
            f"sha256 {hashlib.sha256(data).hexdigest()}",
            f"tensors {len(names)}",
        ]
        for name, shape in names:
            lines.append(f"{name} " + ",".join(map(str, shape)))
        header = "\n".join(lines) + "\ndata\n"
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(data)

    @classmethod
    def load_weights(cls, path) -> "LatentModel":
        with open(path, "rb") as fh:
            raw = fh.read()
        marker = b"\ndata\n"
        cut = raw.find(marker)
        if cut < 0:
            raise FileFormatError(f"{path}: missing data section")
        head_lines = raw[:cut].decode("ascii", errors="replace").split("\n")
        data = raw[cut + len(marker):]
        first = head_lines[0].split()
        if len(first) != 2 or first[0] != WEIGHTS_MAGIC:
            raise FileFormatError(f"{path}: bad magic")
        if first[1] != WEIGHTS_VERSION:
            raise FileFormatError(f"{path}: unsupported weights version {first[1]}")
        fields = {}
        tensor_names: list[tuple[str, tuple[int, ...]]] = []
        it = iter(head_lines[1:])
        for line in it:
            key, _, rest = line.partition(" ")
            if key == "tensors":
                for _ in range(int(rest)):
                    nm, _, shp = next(it).partition(" ")
                    shape = tuple(int(v) for v in shp.split(",") if v)
                    tensor_names.append((nm, shape))
            else:
                fields[key] = rest
        try:
            cfg = ModelConfig(
                grid_shape=tuple(int(v) for v in fields["grid"].split()),
                latent_dim=int(fields["latent_dim"]),
                enc_channels=tuple(int(v) for v in fields["enc_channels"].split(",")),
                dec_channels=tuple(int(v) for v in fields["dec_channels"].split(",")),
                reg_hidden=tuple(int(v) for v in fields["reg_hidden"].split(",")),
            )
            standardizer = PropertyStandardizer(
                mean=np.array([float(v) for v in fields["label_mean"].split(",")]),
                std=np.array([float(v) for v in fields["label_std"].split(",")]),
            )
            digest = fields["sha256"]
        except (KeyError, ValueError) as exc:
            raise FileFormatError(f"{path}: malformed header ({exc})") from exc
        if hashlib.sha256(data).hexdigest() != digest:
            raise FileFormatError(f"{path}: weight payload checksum mismatch")
        model = cls(cfg, standardizer)
        state = {}
        offset = 0
        for name, shape in tensor_names:
            count = int(np.prod(shape)) if shape else 1
            chunk = data[offset : offset + 8 * count]
            if len(chunk) != 8 * count:
                raise FileFormatError(f"{path}: truncated tensor {name}")
            offset += 8 * count
            arr = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
            state[name] = torch.as_tensor(arr, dtype=torch.float32)
        if offset != len(data):
            raise FileFormatError(f"{path}: {len(data) - offset} trailing bytes")
        try:
            model.load_state_dict(state)
        except RuntimeError as exc:
            raise FileFormatError(f"{path}: state mismatch ({exc})") from exc
        return model


def postprocess_density(d: DensityField, cut: float = 0.9) -> Microstructure:
    """Decoder output to admissible-leaning cell: threshold, mirror, repair."""
    return repair(symmetrize(threshold(d, cut)))


@dataclass
class TrainingHistory:
    """Per-epoch mean loss terms."""

    rows: np.ndarray  # (epochs, 5): epoch, recon, kl, reg, total

    def save_csv(self, path) -> None:
        lines = ["epoch,recon,kl,reg,total"]
        for row in self.rows:
            lines.append(
                f"{int(row[0])},{float(row[1])!r},{float(row[2])!r},{float(row[3])!r},{float(row[4])!r}"
            )
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def train(
    db,
    cfg: TrainingConfig = TrainingConfig(),
    model_config: ModelConfig | None = None,
) -> tuple[LatentModel, TrainingHistory]:
    """Joint training on a database; deterministic for a fixed seed.

    Returns the trained model plus per-epoch loss history. Validation split
    indices are reproducible from the seed; the held-out fraction is not
    touched by the optimizer (callers use it for agreement checks).
    """
    if len(db) < 2:
        raise ValidationError("training needs at least two records")
    if cfg.mc_samples < 1 or cfg.batch_size < 1 or cfg.epochs < 1:
        raise ValidationError("mc_samples, batch_size and epochs must be positive")
    torch.set_num_threads(max(1, cfg.torch_threads))
    torch.manual_seed(cfg.rng_seed)

    mcfg = model_config or ModelConfig(grid_shape=db.grid_shape, latent_dim=db.latent_dim)
    standardizer = db.standardizer()
    x_all = np.stack([r.micro.cells for r in db.records]).astype(np.float32)
    y_all = standardizer.transform(db.property_matrix()).astype(np.float32)

    rng = np.random.default_rng(cfg.rng_seed)
    perm = rng.permutation(len(db))
    n_val = int(round(cfg.validation_fraction * len(db)))
    train_idx = perm[n_val:]
    if len(train_idx) == 0:
        raise ValidationError("validation fraction leaves no training data")

    model = LatentModel(mcfg, standardizer)
    lr = cfg.learning_rate
    if cfg.optimizer == "rmsprop":
        opt = torch.optim.RMSprop(model.parameters(), lr=lr)
    elif cfg.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=lr)
    else:
        raise ValidationError(f"unknown optimizer {cfg.optimizer!r}")

    hist = []
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        sums = np.zeros(4)
        seen = 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            x = torch.from_numpy(x_all[idx]).unsqueeze(1)
            y = torch.from_numpy(y_all[idx])
            noise = torch.randn(cfg.mc_samples, len(idx), mcfg.latent_dim)
            terms = model.training_loss(x, y, noise, cfg.regression_weight)
            if not torch.isfinite(terms["total"]):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}"
                )
            opt.zero_grad()
            terms["total"].backward()
            opt.step()
            b = len(idx)
            sums += b * np.array(
                [float(terms[k].detach()) for k in ("recon", "kl", "reg", "total")]
            )
            seen += b
        hist.append([epoch, *(sums / seen)])
    model.eval()
    return model, TrainingHistory(rows=np.array(hist))


def validation_indices(n: int, cfg: TrainingConfig) -> np.ndarray:
    """The held-out index set train() used for this seed and fraction."""
    rng = np.random.default_rng(cfg.rng_seed)
    perm = rng.permutation(n)
    return perm[: int(round(cfg.validation_fraction * n))]


def gradient_check(
    model: LatentModel,
    cells: np.ndarray,
    labels_std: np.ndarray,
    regression_weight: float = 1.0,
    step: float = 1e-6,
    noise_seed: int = 0,
) -> float:
    """Worst relative mismatch between backprop and central differences.

    Runs in float64 with frozen decoder noise so the loss is a smooth,
    deterministic function of the parameters. Intended for tiny models;
    cost scales with parameter count times two forwards.
    """
    import copy

    model = copy.deepcopy(model).double()
    x = torch.as_tensor(np.asarray(cells), dtype=torch.float64).unsqueeze(1)
    y = torch.as_tensor(np.asarray(labels_std), dtype=torch.float64)
    gen = torch.Generator().manual_seed(noise_seed)
    noise = torch.randn(1, x.shape[0], model.config.latent_dim, generator=gen, dtype=torch.float64)

    def total() -> torch.Tensor:
        return model.training_loss(x, y, noise, regression_weight)["total"]

    model.zero_grad()
    total().backward()
    params = [p for p in model.parameters()]
    analytic = torch.cat([p.grad.flatten() for p in params]).numpy()
    fd = np.empty_like(analytic)
    pos = 0
    with torch.no_grad():
        for p in params:
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = total().item()
                flat[i] = orig - step
                lo = total().item()
                flat[i] = orig
                fd[pos] = (hi - lo) / (2 * step)
                pos += 1
    gmax = np.abs(analytic).max()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-3 * max(gmax, 1e-12))
    return float(np.max(np.abs(analytic - fd) / denom))
