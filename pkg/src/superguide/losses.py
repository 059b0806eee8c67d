"""Per-sample objectives and the weighted batch loss.

Per-sample functions reduce over every axis except a leading batch axis,
so they return a vector of shape (B,) for batched input and a 0-d tensor
for a single sample.
"""

import math
from dataclasses import dataclass

import torch


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    beta: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.0

    def __post_init__(self):
        for name in ("beta", "lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise LossError(f"{name} must be finite and nonnegative, got {v}")


@dataclass
class LossBreakdown:
    ce1: float
    ce2: float
    beta_loss: float
    att_loss: float
    reg: float
    total: float

    CSV_HEADER = "epoch,batch,ce1,ce2,beta,att,reg,total"

    def csv_row(self, epoch, batch, populated=("ce1", "ce2", "beta_loss", "att_loss", "reg", "total")):
        cells = []
        for name in ("ce1", "ce2", "beta_loss", "att_loss", "reg", "total"):
            cells.append(f"{getattr(self, name):.10g}" if name in populated else "")
        return ",".join([str(epoch), str(batch)] + cells)


def _sum_per_sample(t, sample_dims):
    if t.dim() <= sample_dims:
        return t.sum()
    return t.flatten(t.dim() - sample_dims).sum(dim=-1)


def kl_divergence(mu, log_var):
    """KL(N(mu, exp(log_var)) || N(0, I)) summed over the last axis."""
    # expm1 keeps exp(v) - 1 - v >= 0 when v is tiny
    return 0.5 * (mu.pow(2) + (torch.expm1(log_var) - log_var)).sum(dim=-1)


def reconstruction_nll(image, reconstruction):
    """Unit-variance Gaussian negative log-likelihood up to a constant."""
    if image.shape != reconstruction.shape:
        raise LossError(f"image {tuple(image.shape)} vs reconstruction {tuple(reconstruction.shape)}")
    return 0.5 * _sum_per_sample((image - reconstruction).pow(2), 3)


def beta_vae_loss(image, reconstruction, code, beta):
    """Negative beta-ELBO: recon_nll + beta * KL."""
    for t in (image, reconstruction, code.mu, code.log_var):
        if not torch.isfinite(t).all():
            raise LossError("non-finite input to beta_vae_loss")
    return reconstruction_nll(image, reconstruction) + beta * kl_divergence(code.mu, code.log_var)


def cross_entropy(logits, y):
    """-log softmax(logits)[y] via log-sum-exp; works per sample on (B, C)."""
    y = torch.as_tensor(y, dtype=torch.long)
    n = logits.shape[-1]
    if ((y < 0) | (y >= n)).any():
        raise LossError(f"label out of range [0, {n})")
    lse = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(-1, y.unsqueeze(-1)).squeeze(-1)
    return lse - picked


def alignment_loss(g1, m1, g2, m2):
    """||g1 - m1||_F^2 + ||g2 - m2||_F^2 (sums, not means)."""
    grids = [getattr(m, "grid", m) for m in (g1, m1, g2, m2)]
    shape = grids[0].shape[-2:]
    if any(g.shape[-2:] != shape for g in grids):
        raise LossError("alignment maps must share h x w")
    a = _sum_per_sample((grids[0] - grids[1]).pow(2), 2)
    b = _sum_per_sample((grids[2] - grids[3]).pow(2), 2)
    return a + b


def head_l2(params):
    """Sum of squares over all tensors in ``params`` (weights and biases)."""
    total = None
    for p in params:
        s = p.pow(2).sum()
        total = s if total is None else total + s
    return total if total is not None else torch.zeros(())


def total_loss(ce1, ce2, beta_loss, att_loss, reg, weights, sample_weight=1.0, reduction="sum"):
    """Weighted batch objective.

    Per-sample terms are tensors of shape (B,) (or 0-d for one sample);
    ``reg`` is the scalar ||omega1||^2.  With ``reduction="sum"`` the reg
    term enters once per sample (|B| * lambda3 * reg); with ``"mean"`` the
    per-sample terms are averaged and reg enters once.  ``sample_weight``
    (scalar or (B,)) multiplies ce1 only.

    Returns ``(total_tensor, LossBreakdown)``; the breakdown reports the
    reduced, unweighted components.
    """
    ce1, ce2, beta_loss, att_loss, reg = (
        torch.as_tensor(p, dtype=torch.get_default_dtype()) if not torch.is_tensor(p) else p
        for p in (ce1, ce2, beta_loss, att_loss, reg)
    )
    sw = torch.as_tensor(sample_weight, dtype=ce1.dtype)
    if (sw < 0).any():
        raise LossError("sample_weight must be nonnegative")
    parts = [ce1, ce2, beta_loss, att_loss, reg]
    if not all(torch.isfinite(p).all() for p in parts):
        raise LossError("non-finite loss component")
    if reduction not in ("sum", "mean"):
        raise LossError(f"unknown batch reduction {reduction!r}")
    n = ce1.numel()
    red = torch.sum if reduction == "sum" else torch.mean
    reg_mult = n if reduction == "sum" else 1
    r_ce1 = red(sw * ce1)
    r_ce2, r_beta, r_att = red(ce2), red(beta_loss), red(att_loss)
    total = (
        r_ce1
        + r_ce2
        + weights.lambda1 * r_beta
        + weights.lambda2 * r_att
        + weights.lambda3 * reg_mult * reg
    )
    breakdown = LossBreakdown(
        ce1=float(r_ce1.detach()),
        ce2=float(r_ce2.detach()),
        beta_loss=float(r_beta.detach()),
        att_loss=float(r_att.detach()),
        reg=float(reg.detach()),
        total=float(total.detach()),
    )
    return total, breakdown


def parse_lambda3(value, n1):
    """Accept ``"1000/n1"``-style values as well as plain numbers."""
    text = str(value).replace(" ", "")
    if text.endswith("/n1"):
        return float(text[: -len("/n1")]) / n1
    return float(text)
