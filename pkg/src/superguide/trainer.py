"""Training loop with attribution alignment, best-checkpoint selection and JTT.

Each batch: encode, sample z, decode, score both heads on the latent means,
take GradCAM maps of the true-label log-probabilities, compare them to the cached
guidance maps, and take one AdamW step on the weighted sum of all terms.
Validation worst-group accuracy is measured after every epoch and the
earliest best epoch is kept.
"""

import copy
import logging
import math
from dataclasses import dataclass, field, fields

import torch

from .attribution import AttributionError, gradcam
from .data import stack_split
from .evaluation import evaluate, predict_records
from .losses import (
    LossBreakdown,
    LossError,
    LossWeights,
    alignment_loss,
    beta_vae_loss,
    cross_entropy,
    head_l2,
    parse_lambda3,
    total_loss,
)
from .model import SuperModel, init_model, reparameterize

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# Loss weights for the 16x16 synthetic benchmark.  The alignment and
# beta-VAE terms are sums over pixels, so at this scale they need small
# weights to stay commensurate with the two cross-entropies.
DESK_WEIGHTS = {"beta": 1.0, "lambda1": 0.01, "lambda2": 0.01, "lambda3": 0.0}


class NonFiniteLoss(RuntimeError):
    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass
class JTTConfig:
    id_epochs: int = 1
    id_lr: float = 1e-3
    upweight: float = 100.0

    def __post_init__(self):
        if self.upweight < 1:
            raise ConfigError(f"jtt upweight must be >= 1, got {self.upweight}")
        if self.id_epochs < 1 or self.id_lr <= 0:
            raise ConfigError("jtt id_epochs must be >= 1 and id_lr > 0")


@dataclass
class TrainConfig:
    beta: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: object = 0.0  # float, or "C/n1"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    weight_decay: float = 1e-4
    seed: int = 0
    guidance: str = "oracle"
    prompts: tuple = ("a shape",)
    latent_dim: int = 16
    batch_reduction: str = "sum"
    detach_alpha: bool = False
    attribution_score: str = "log_prob"
    oracle_corruption: float = 0.0
    channels: tuple = (16, 32, 32, 32)
    kernels: tuple = (3, 3, 1, 1)
    jtt: JTTConfig | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_reduction not in ("sum", "mean"):
            raise ConfigError(f"batch_reduction must be sum or mean, got {self.batch_reduction!r}")
        if self.guidance not in ("oracle", "vlm"):
            raise ConfigError(f"guidance must be oracle or vlm, got {self.guidance!r}")
        if self.attribution_score not in ("logit", "log_prob"):
            raise ConfigError(f"attribution_score must be logit or log_prob, got {self.attribution_score!r}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")

    def loss_weights(self, n1):
        try:
            lam3 = parse_lambda3(self.lambda3, n1)
            return LossWeights(self.beta, self.lambda1, self.lambda2, lam3)
        except (ValueError, LossError) as e:
            raise ConfigError(str(e)) from e

    def snapshot(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, JTTConfig):
                v = {"id_epochs": v.id_epochs, "id_lr": v.id_lr, "upweight": v.upweight}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


_FLOAT_KEYS = {"beta", "lambda1", "lambda2", "learning_rate", "weight_decay", "oracle_corruption"}
_INT_KEYS = {"batch_size", "epochs", "seed", "latent_dim"}
_JTT_KEYS = {"jtt_id_epochs", "jtt_id_lr", "jtt_upweight"}


def parse_kv(text):
    """Flat ``key=value`` lines with ``#`` comments."""
    kv = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in kv:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kv[key] = value
    return kv


def _bool(value):
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def config_from_kv(kv, require_jtt=False):
    kw, jtt = {}, {}
    for key, value in kv.items():
        try:
            if key in _FLOAT_KEYS:
                kw[key] = float(value)
            elif key in _INT_KEYS:
                kw[key] = int(value)
            elif key == "lambda3":
                kw[key] = value if value.replace(" ", "").endswith("/n1") else float(value)
            elif key in ("guidance", "batch_reduction", "attribution_score"):
                kw[key] = value
            elif key == "detach_alpha":
                kw[key] = _bool(value)
            elif key == "prompts":
                kw[key] = tuple(p.strip() for p in value.split("|") if p.strip())
            elif key in ("channels", "kernels"):
                kw[key] = tuple(int(c) for c in value.split(","))
            elif key in _JTT_KEYS:
                jtt[key[len("jtt_") :]] = float(value) if key != "jtt_id_epochs" else int(value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"bad value for {key}: {value!r}") from e
    if require_jtt:
        missing = sorted(_JTT_KEYS - set(kv))
        if missing:
            raise ConfigError(f"--jtt needs config keys {missing}")
        kw["jtt"] = JTTConfig(**jtt)
    return TrainConfig(**kw)


def load_config(path, require_jtt=False):
    with open(path, encoding="utf-8") as f:
        return config_from_kv(parse_kv(f.read()), require_jtt=require_jtt)


@dataclass
class TrainState:
    model: SuperModel
    epoch: int = 0
    best_val_wga: float = -math.inf
    best_epoch: int = 0
    best_state: dict | None = None
    history: list = field(default_factory=list)
    log: list = field(default_factory=list)
    steps: int = 0
    last: LossBreakdown | None = None

    def best_model(self):
        m = copy.deepcopy(self.model)
        m.load_state_dict(self.best_state)
        m.eval()
        return m


def early_stop_select(val_wga_by_epoch):
    """1-based index of the earliest maximum."""
    if not val_wga_by_epoch:
        raise ValueError("need at least one epoch")
    best = max(val_wga_by_epoch)
    return val_wga_by_epoch.index(best) + 1


def true_class_score(logits, y, kind="logit"):
    """Summed per-sample score of the true class: raw logit or log-probability."""
    if kind == "log_prob":
        logits = torch.log_softmax(logits, dim=-1)
    return logits.gather(1, y[:, None]).sum()


def _alignment_terms(model, feats, g1, g2, y, guide, detach_alpha, need_graph, score="logit"):
    """Per-sample alignment loss plus the two head maps."""
    s1 = true_class_score(g1, y, score)
    s2 = true_class_score(g2, y, score)
    m1 = gradcam(feats.maps, s1, detach_alpha=detach_alpha or not need_graph, source="head1").grid
    m2 = gradcam(feats.maps, s2, detach_alpha=detach_alpha or not need_graph, source="head2").grid
    if not need_graph:
        m1, m2 = m1.detach(), m2.detach()
    att = alignment_loss(guide, m1, 1.0 - guide, m2)
    return att, m1, m2


def _batches(n, batch_size, gen):
    perm = torch.randperm(n, generator=gen)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _fresh_model(ds, cfg):
    torch.manual_seed(cfg.seed)
    model = SuperModel(
        image_size=ds.image_shape[-1], n_classes=ds.n_classes, latent_dim=cfg.latent_dim,
        channels=cfg.channels,
        kernels=cfg.kernels,
    )
    return init_model(model, cfg.seed)


def train(ds, cfg, guidance_maps, sample_weights=None, on_batch=None):
    """Run the full objective for ``cfg.epochs`` epochs.

    ``guidance_maps`` maps each train sample id to its relevant map (an
    (h, w) tensor at the model's feature resolution).  ``sample_weights``
    optionally maps ids to a ce1 multiplier (JTT).  Returns a
    :class:`TrainState` holding the best-epoch parameters.
    """
    train_recs = ds.split("train")
    if not train_recs or not ds.split("val"):
        raise ConfigError("train and val splits must be nonempty")
    model = _fresh_model(ds, cfg)
    weights = cfg.loss_weights(model.n1)
    X, Y, _ = (torch.from_numpy(a) for a in stack_split(train_recs))
    ids = [r.id for r in train_recs]
    try:
        G = torch.stack([torch.as_tensor(guidance_maps[i], dtype=torch.float32) for i in ids])
    except KeyError as e:
        raise ConfigError(f"no guidance map for train sample {e.args[0]!r}") from e
    if tuple(G.shape[-2:]) != (model.feat_size, model.feat_size):
        raise ConfigError(f"guidance maps are {tuple(G.shape[-2:])}, model maps are {model.feat_size}x{model.feat_size}")
    SW = torch.ones(len(ids))
    if sample_weights:
        SW = torch.tensor([float(sample_weights.get(i, 1.0)) for i in ids])

    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    need_graph = weights.lambda2 > 0
    state = TrainState(model)
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        for b, idx in enumerate(_batches(len(ids), cfg.batch_size, gen), start=1):
            x, y, guide = X[idx], Y[idx], G[idx]
            code, feats = model.encode(x)
            eps = torch.randn(code.mu.shape, generator=gen)
            recon = model.decode(reparameterize(code, eps))
            g1 = model.classify(1, code.mu1)
            g2 = model.classify(2, code.mu2)
            ce1 = cross_entropy(g1, y)
            ce2 = cross_entropy(g2, y)
            try:
                att, _, _ = _alignment_terms(
                    model, feats, g1, g2, y, guide, cfg.detach_alpha, need_graph, cfg.attribution_score
                )
            except AttributionError as e:
                raise NonFiniteLoss(f"epoch {epoch} batch {b}: {e}", state.last) from e
            bvae = beta_vae_loss(x, recon, code, weights.beta)
            reg = head_l2(model.head1.parameters())
            try:
                total, bd = total_loss(ce1, ce2, bvae, att, reg, weights, SW[idx], cfg.batch_reduction)
            except LossError as e:
                raise NonFiniteLoss(f"epoch {epoch} batch {b}: {e}", _breakdown_or_none(ce1, ce2, bvae, att, reg)) from e
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            state.steps += 1
            state.log.append(bd.csv_row(epoch, b))
            state.last = bd
            if on_batch is not None:
                on_batch(epoch, b, bd)
        _end_epoch(state, ds, epoch)
    return state


def _breakdown_or_none(*parts):
    try:
        vals = [float(torch.as_tensor(p).detach().sum()) for p in parts]
    except Exception:
        return None
    return LossBreakdown(*vals, total=math.nan)


def _end_epoch(state, ds, epoch):
    report = evaluate(state.model, ds, "val")
    state.model.train()
    state.history.append(report)
    state.epoch = epoch
    if report.worst > state.best_val_wga:
        state.best_val_wga = report.worst
        state.best_epoch = epoch
        state.best_state = copy.deepcopy(state.model.state_dict())
    logger.info("epoch %d val wga %.4f avg %.4f", epoch, report.worst, report.average)


def _train_erm(ds, cfg, epochs, lr, keep_best=True):
    train_recs = ds.split("train")
    if not train_recs or not ds.split("val"):
        raise ConfigError("train and val splits must be nonempty")
    model = _fresh_model(ds, cfg)
    X, Y, _ = (torch.from_numpy(a) for a in stack_split(train_recs))
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=cfg.weight_decay)
    state = TrainState(model)
    model.train()
    for epoch in range(1, epochs + 1):
        for b, idx in enumerate(_batches(len(X), cfg.batch_size, gen), start=1):
            code, _ = model.encode(X[idx])
            ce1 = cross_entropy(model.classify(1, code.mu1), Y[idx])
            loss = ce1.sum() if cfg.batch_reduction == "sum" else ce1.mean()
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch} batch {b}: non-finite ERM loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            state.steps += 1
            v = float(loss.detach())
            bd = LossBreakdown(v, 0.0, 0.0, 0.0, 0.0, v)
            state.log.append(bd.csv_row(epoch, b, populated=("ce1", "total")))
        if keep_best:
            _end_epoch(state, ds, epoch)
    if not keep_best:
        state.best_state = copy.deepcopy(model.state_dict())
        state.epoch = epochs
    return state


def train_erm_baseline(ds, cfg):
    """Single head on the encoder's mu1, cross-entropy only, same protocol."""
    state = _train_erm(ds, cfg, cfg.epochs, cfg.learning_rate)
    best = state.best_model()
    return state, evaluate(best, ds, "test")


def jtt_identify(ds, cfg):
    """Ids of train samples misclassified by a short ERM run."""
    if cfg.jtt is None:
        raise ConfigError("jtt is not configured")
    state = _train_erm(ds, cfg, cfg.jtt.id_epochs, cfg.jtt.id_lr, keep_best=False)
    return misclassified_ids(state.model, ds.split("train"))


def misclassified_ids(model, records):
    model.eval()
    pred = predict_records(model, records)
    return {r.id for r, p in zip(records, pred) if int(p) != r.label}


def jtt_weights(ids, upweight):
    return {i: float(upweight) for i in ids}
