"""Superclass-relevance guidance maps and their on-disk cache.

A provider turns a sample into a :class:`GuidancePair` at the model's
feature resolution.  Two providers exist: :class:`VLMGuidance`, GradCAM of
image/text cosine similarity under a frozen vision-language model, and
:class:`OracleGuidance`, which reads the ground-truth foreground mask of
synthetic data (optionally corrupted on a seeded subset of samples).
"""

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .attribution import (
    AttributionMap,
    average_maps,
    complement,
    gradcam,
    minmax_normalize,
    parse_sidecar,
    resample,
    format_sidecar,
)

logger = logging.getLogger(__name__)

PROMPT_TEMPLATES = {
    1: ["{a} {sc}"],
    2: ["{a} {sc}", "a photo of {a} {sc}"],
    5: [
        "{a} {sc}",
        "a photo of {a} {sc}",
        "a picture of {a} {sc}",
        "an image of {a} {sc}",
        "{a} {sc} photograph",
    ],
}


class GuidanceError(ValueError):
    pass


class PromptSet:
    """Deduplicated, nonempty, order-preserving list of text prompts."""

    def __init__(self, prompts):
        seen = []
        for p in prompts:
            p = p.strip()
            if p and p not in seen:
                seen.append(p)
        if not seen:
            raise GuidanceError("a prompt set needs at least one nonempty prompt")
        self.prompts = seen

    @classmethod
    def for_superclass(cls, superclass, n=1):
        if n not in PROMPT_TEMPLATES:
            raise GuidanceError(f"no prompt variants for n={n}; choose from {sorted(PROMPT_TEMPLATES)}")
        article = "an" if superclass[:1].lower() in "aeiou" else "a"
        return cls([t.format(a=article, sc=superclass) for t in PROMPT_TEMPLATES[n]])

    def __len__(self):
        return len(self.prompts)

    def __iter__(self):
        return iter(self.prompts)

    def digest(self):
        return hashlib.sha256("\n".join(self.prompts).encode()).hexdigest()[:12]


@dataclass
class GuidancePair:
    relevant: AttributionMap
    irrelevant: AttributionMap
    provider_tag: str
    sample_id: str

    @classmethod
    def from_relevant(cls, grid, provider_tag, sample_id):
        rel = AttributionMap(grid, "guidance_relevant")
        return cls(rel, complement(rel), provider_tag, sample_id)


# -- vision-language guidance -----------------------------------------------------


def cosine_similarity(z, t):
    """z . t / (|z| |t|) with no temperature."""
    denom = z.norm(dim=-1) * t.norm(dim=-1)
    s = (z * t).sum(dim=-1) / denom
    return s


class TinyVLM(nn.Module):
    """Frozen toy vision-language model exposing the handle protocol.

    The handle protocol is three methods: ``feature_maps(x)`` returns the
    last conv activations (B, K, h, w) for images (B, 3, H, W);
    ``embed_maps(maps)`` finishes the image tower from those activations;
    ``encode_text(prompt)`` returns the text embedding.  Real models (e.g.
    a ResNet CLIP) plug in by splitting their image tower at the last
    conv layer.
    """

    def __init__(self, embed_dim=16, channels=8, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(3, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.proj = nn.Linear(channels, embed_dim)
        self.embed_dim = embed_dim
        self._text_seed = seed
        self.name = f"tinyvlm-{embed_dim}x{channels}-s{seed}"
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * 0.5)
        self.requires_grad_(False)

    def feature_maps(self, x):
        return torch.tanh(self.conv2(F.relu(self.conv1(x))))

    def embed_maps(self, maps):
        return self.proj(maps.mean(dim=(-2, -1)))

    def encode_text(self, prompt):
        """Hashed bag-of-words embedding."""
        vec = torch.zeros(self.embed_dim)
        for tok in prompt.lower().split():
            h = hashlib.sha256(f"{self._text_seed}:{tok}".encode()).digest()
            g = torch.Generator().manual_seed(int.from_bytes(h[:8], "little"))
            vec += torch.randn(self.embed_dim, generator=g)
        return vec


def vlm_guidance(image, prompts, vlm, target_hw=None, sample_id="", provider_tag="vlm"):
    """Prompt-averaged GradCAM of image/text cosine similarity.

    Each prompt's map is normalized, the maps are averaged (not
    re-normalized), and the irrelevant map is the complement.  Prompts are
    deduplicated first, so repeating a prompt does not change the result.  Only the
    feature maps are differentiated; the model's parameters never
    receive gradient.
    """
    if not isinstance(prompts, PromptSet):
        prompts = PromptSet(prompts)
    x = torch.as_tensor(image, dtype=torch.float32)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    per_prompt = []
    with torch.enable_grad():
        for prompt in prompts:
            try:
                t = vlm.encode_text(prompt).detach()
            except Exception as e:
                raise GuidanceError(f"failed to encode prompt {prompt!r}: {e}") from e
            # the maps are the only differentiated leaf
            maps = vlm.feature_maps(x).detach().requires_grad_(True)
            z = vlm.embed_maps(maps)
            s = cosine_similarity(z, t).sum()
            if not torch.isfinite(s):
                raise GuidanceError(f"non-finite similarity for prompt {prompt!r}")
            amap = gradcam(maps, s, detach_alpha=True, source="guidance_relevant")
            per_prompt.append(AttributionMap(amap.grid.detach()[0], "guidance_relevant"))
    rel = average_maps(per_prompt)
    if target_hw is not None:
        rel = resample(rel, *target_hw)
    return GuidancePair.from_relevant(rel.grid, provider_tag, sample_id)


class VLMGuidance:
    def __init__(self, vlm, prompts, target_hw):
        self.vlm = vlm
        self.prompts = prompts
        self.target_hw = tuple(target_hw)
        self.tag = "vlm"
        self.calls = 0

    def key(self):
        return {
            "provider": self.tag,
            "model": getattr(self.vlm, "name", type(self.vlm).__name__),
            "prompts": self.prompts.digest(),
            "hw": list(self.target_hw),
        }

    def __call__(self, record):
        self.calls += 1
        return vlm_guidance(record.image, self.prompts, self.vlm, self.target_hw, record.id, self.tag)


# -- oracle guidance ----------------------------------------------------------------


def corruption_key(sample_id, seed):
    """Deterministic uniform key in [0, 1) derived from (seed, sample id)."""
    h = hashlib.sha256(f"{seed}:{sample_id}".encode()).digest()
    return int.from_bytes(h[:8], "big") / 2.0**64


def select_corrupted(ids, rate, seed):
    """The ``round(rate * len(ids))`` ids with the smallest keys."""
    ids = sorted(set(ids))
    n_bad = int(round(rate * len(ids)))
    ranked = sorted(ids, key=lambda i: (corruption_key(i, seed), i))
    return frozenset(ranked[:n_bad])


class OracleGuidance:
    """Ground-truth mask guidance.

    With corruption rate ``c``, exactly ``round(c * N)`` of the ``N`` ids in
    ``population`` (chosen by a seeded hash ranking) get the complement of
    their mask, emulating a biased guidance model.
    """

    def __init__(self, target_hw, corruption=0.0, seed=0, population=()):
        if not 0.0 <= corruption < 1.0:
            raise GuidanceError(f"corruption rate must lie in [0, 1), got {corruption}")
        if corruption > 0 and not population:
            raise GuidanceError("corrupted oracle guidance needs the sample population")
        self.target_hw = tuple(target_hw)
        self.corruption = corruption
        self.seed = seed
        self.corrupted = select_corrupted(population, corruption, seed) if corruption > 0 else frozenset()
        self.tag = "oracle"
        self.calls = 0

    def key(self):
        return {
            "provider": self.tag,
            "corruption": self.corruption,
            "seed": self.seed,
            "hw": list(self.target_hw),
        }

    def is_corrupted(self, sample_id):
        return sample_id in self.corrupted

    def __call__(self, record):
        self.calls += 1
        return oracle_guidance(record, self.target_hw, corrupted=self.is_corrupted(record.id))


def oracle_guidance(record, target_hw, corrupted=False):
    """Mask resampled to ``target_hw`` and normalized; complemented if ``corrupted``."""
    if record.foreground_mask is None:
        raise GuidanceError(f"record {record.id} has no foreground mask")
    mask = torch.as_tensor(np.asarray(record.foreground_mask, dtype=np.float64))
    grid = resample(AttributionMap(mask, "guidance_relevant"), *target_hw).grid
    grid = minmax_normalize(grid)
    if corrupted:
        grid = 1.0 - grid
    return GuidancePair.from_relevant(grid, "oracle", record.id)


# -- cache --------------------------------------------------------------------------


class GuidanceCache:
    """``<root>/<provider_tag>/<sample_id>.map`` plus a ``KEY.json`` per provider.

    The key records everything the maps depend on (provider settings,
    prompt-set hash, resolution); opening a cache under a different key
    raises :class:`GuidanceError`.
    """

    def __init__(self, root, key):
        self.root = root
        self.key = dict(key)
        self.tag = self.key["provider"]
        self.dir = os.path.join(root, self.tag)

    @classmethod
    def default_root(cls, fallback):
        return os.environ.get("SUPER_CACHE_DIR", fallback)

    def _key_path(self):
        return os.path.join(self.dir, "KEY.json")

    def check(self, create=False):
        if not os.path.isdir(self.dir):
            if create:
                os.makedirs(self.dir, exist_ok=True)
                with open(self._key_path(), "w", encoding="utf-8") as f:
                    json.dump(self.key, f, sort_keys=True)
                return
            found = sorted(os.listdir(self.root)) if os.path.isdir(self.root) else []
            raise GuidanceError(f"no guidance cache for provider {self.tag!r} under {self.root} (found: {found})")
        with open(self._key_path(), encoding="utf-8") as f:
            stored = json.load(f)
        if stored != json.loads(json.dumps(self.key, sort_keys=True)):
            raise GuidanceError(f"guidance cache key mismatch: stored {stored}, requested {self.key}")

    def path(self, sample_id):
        return os.path.join(self.dir, f"{sample_id}.map")

    def has(self, sample_id):
        return os.path.isfile(self.path(sample_id))

    def write(self, pair):
        if pair.provider_tag != self.tag:
            raise GuidanceError(f"pair from provider {pair.provider_tag!r} written to {self.tag!r} cache")
        fd, tmp = tempfile.mkstemp(dir=self.dir, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="ascii") as f:
            f.write(format_sidecar(pair.relevant.grid))
        os.replace(tmp, self.path(pair.sample_id))

    def load(self, sample_id):
        path = self.path(sample_id)
        if not os.path.isfile(path):
            raise GuidanceError(f"no cached guidance for sample {sample_id!r} in {self.dir}")
        with open(path, encoding="ascii") as f:
            grid = torch.from_numpy(parse_sidecar(f.read()))
        return GuidancePair.from_relevant(grid, self.tag, sample_id)


def cache_guidance(records, provider, root):
    """Fill the cache for ``records``; only missing entries call the provider."""
    cache = GuidanceCache(root, provider.key())
    cache.check(create=True)
    for r in records:
        if not cache.has(r.id):
            cache.write(provider(r))
    return cache


def load_cached(cache, sample_id):
    return cache.load(sample_id)


def guidance_tensors(cache, ids, dtype=torch.float32):
    """Stack cached relevant maps for ``ids`` into a (N, h, w) tensor."""
    return torch.stack([cache.load(i).relevant.grid.to(dtype) for i in ids])
