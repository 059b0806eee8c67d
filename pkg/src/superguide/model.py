"""Split-latent variational autoencoder with two linear classifier heads.

The encoder is a small conv stack.  Its last convolutional activations
(the feature stack) are kept so attribution maps can be taken w.r.t. them;
the latent mean and log-variance are an affine map of their global average.
"""

import io
import math
from dataclasses import dataclass

import torch
from torch import nn

CKPT_MAGIC = "SUPER-CKPT-1"


class ShapeError(ValueError):
    pass


@dataclass
class LatentCode:
    """Diagonal Gaussian posterior parameters; ``mu``/``log_var`` are (..., 2d)."""

    mu: torch.Tensor
    log_var: torch.Tensor
    d: int

    @property
    def mu1(self):
        return self.mu[..., : self.d]

    @property
    def mu2(self):
        return self.mu[..., self.d :]


@dataclass
class FeatureStack:
    """Last-conv activations ``maps`` of shape (..., K, h, w).

    The maps stay attached to the autograd graph, so any scalar computed
    from the model's heads is differentiable with respect to them.
    """

    maps: torch.Tensor

    @property
    def K(self):
        return self.maps.shape[-3]

    @property
    def hw(self):
        return tuple(self.maps.shape[-2:])


def _conv(cin, cout, k, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2), nn.ReLU())


class SuperModel(nn.Module):
    """Encoder phi, decoder theta and heads omega1 (on mu1) / omega2 (on mu2)."""

    def __init__(self, image_size=16, n_classes=2, latent_dim=16, channels=(16, 32, 32, 32), kernels=(3, 3, 1, 1)):
        super().__init__()
        if image_size % 4:
            raise ShapeError("image_size must be a multiple of 4")
        self.image_size = image_size
        self.n_classes = n_classes
        self.d = latent_dim
        self.channels = tuple(channels)
        self.kernels = tuple(kernels)
        if len(self.kernels) != len(self.channels) or len(self.channels) < 2:
            raise ShapeError("channels and kernels need equal length >= 2")
        blocks, cin = [], 3
        for i, (c, k) in enumerate(zip(channels, kernels)):
            blocks.append(_conv(cin, c, k, 2 if i == 1 else 1))
            cin = c
        self.features = nn.Sequential(*blocks)
        self.K = cin
        self.feat_size = image_size // 2
        self.to_mu = nn.Linear(cin, 2 * latent_dim)
        self.to_log_var = nn.Linear(cin, 2 * latent_dim)

        s = self.feat_size // 2
        self._dec_s = s
        self.dec_fc = nn.Linear(2 * latent_dim, 32 * s * s)
        self.dec = nn.Sequential(
            nn.ReLU(),
            nn.ConvTranspose2d(32, 32, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 3, 3, padding=1),
        )
        self.head1 = nn.Linear(latent_dim, n_classes)
        self.head2 = nn.Linear(latent_dim, n_classes)

    @property
    def n1(self):
        """Parameter count of omega1."""
        return sum(p.numel() for p in self.head1.parameters())

    def manifest(self):
        return {
            "d": self.d,
            "K": self.K,
            "H": self.image_size,
            "W": self.image_size,
            "n_classes": self.n_classes,
            "channels": list(self.channels),
            "kernels": list(self.kernels),
            "feat_h": self.feat_size,
            "feat_w": self.feat_size,
        }

    def encode(self, x):
        """Return ``(LatentCode, FeatureStack)`` for images of shape (B, 3, H, W)."""
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, self.image_size, self.image_size):
            raise ShapeError(f"expected images (B, 3, {self.image_size}, {self.image_size}), got {tuple(x.shape)}")
        maps = self.features(x)
        mu, log_var = self.latent_from_maps(maps)
        return LatentCode(mu, log_var, self.d), FeatureStack(maps)

    def latent_from_maps(self, maps):
        pooled = maps.mean(dim=(-2, -1))
        return self.to_mu(pooled), self.to_log_var(pooled)

    def decode(self, z):
        if z.shape[-1] != 2 * self.d:
            raise ShapeError(f"latent length {z.shape[-1]} != 2d = {2 * self.d}")
        lead = z.shape[:-1]
        h = self.dec_fc(z.reshape(-1, 2 * self.d)).view(-1, 32, self._dec_s, self._dec_s)
        out = self.dec(h)
        return out.reshape(*lead, 3, self.image_size, self.image_size)

    def classify(self, head, mu_half):
        if mu_half.shape[-1] != self.d:
            raise ShapeError(f"head input length {mu_half.shape[-1]} != d = {self.d}")
        if head == 1:
            return self.head1(mu_half)
        if head == 2:
            return self.head2(mu_half)
        raise ValueError(f"head must be 1 or 2, got {head}")

    @torch.no_grad()
    def predict(self, x):
        """Class predictions from omega1(mu1); ties go to the lowest index."""
        code, _ = self.encode(x)
        return self.classify(1, code.mu1).argmax(dim=-1)

    def vae_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("head")]


def reparameterize(code, noise):
    """z = mu + exp(log_var / 2) * noise."""
    if noise.shape != code.mu.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(code.mu.shape)}")
    return code.mu + torch.exp(0.5 * code.log_var) * noise


def init_model(model, seed):
    """Seeded fan-in (Kaiming-uniform) initialization with zero biases."""
    g = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            w = m.weight
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = w.shape[0] * w[0, 0].numel()
            else:
                fan_in = w[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                w.copy_((torch.rand(w.shape, generator=g) * 2 - 1) * bound)
                if m.bias is not None:
                    m.bias.zero_()
    # log-variance starts near zero so early samples are not too noisy
    with torch.no_grad():
        model.to_log_var.weight.mul_(0.01)
    return model


def save_checkpoint(path, model, seed=0, epoch=0, extra=None):
    manifest = dict(model.manifest(), seed=seed, epoch=epoch)
    if extra:
        manifest.update(extra)
    payload = {"magic": CKPT_MAGIC, "manifest": manifest, "state_dict": model.state_dict()}
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Return ``(model, manifest)``; raises :class:`CheckpointError` on bad files."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises several unrelated types here
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a {CKPT_MAGIC} checkpoint")
    m = payload["manifest"]
    model = SuperModel(
        image_size=m["H"], n_classes=m["n_classes"], latent_dim=m["d"], channels=m["channels"], kernels=m["kernels"]
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, m
