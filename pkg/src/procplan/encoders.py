"""Stand-in frozen backbones, the trainable visual projection and the step-description expander."""
from __future__ import annotations

import hashlib
import json
import logging
import threading
import urllib.error
import urllib.request
from pathlib import Path

import torch
from torch import nn

from .errors import ShapeError, TransportError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "To {label}: perform the action carefully."


class VisualEncoder(nn.Module):
    """Frozen ``tanh(W v)`` backbone followed by a trainable linear projection."""

    def __init__(self, d_raw=64, d_back=64, d_model=64, backbone_bias=False):
        super().__init__()
        self.d_raw = d_raw
        self.backbone = nn.Linear(d_raw, d_back, bias=backbone_bias)
        nn.init.normal_(self.backbone.weight, std=1.0 / d_raw ** 0.5)
        if backbone_bias:
            nn.init.normal_(self.backbone.bias, std=0.1)
        self.backbone.requires_grad_(False)
        self.projection = nn.Linear(d_back, d_model)
        nn.init.zeros_(self.projection.bias)

    def features(self, raw):
        return torch.tanh(self.backbone(raw))

    def forward(self, raw):
        if raw.shape[-1] != self.d_raw:
            raise ShapeError(f"expected raw features of dimension {self.d_raw}, got {raw.shape[-1]}")
        return self.projection(self.features(raw))


def _tokens(text):
    return text.lower().replace(":", " ").replace(";", " ").replace(".", " ").replace(",", " ").split()


def _buckets(token, n_buckets, key, probes):
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8 * probes, key=key).digest()
    return [int.from_bytes(digest[8 * i:8 * i + 8], "little") % n_buckets for i in range(probes)]


class TextEncoder(nn.Module):
    """Frozen hashed bag of unigrams and bigrams, mean pooled, then a fixed linear map.

    Each gram sums ``probes`` table rows addressed by a keyed hash, so two texts
    only coincide if every probe of every gram collides.
    """

    def __init__(self, d_model=64, d_hash=64, n_buckets=4096, hash_seed=0, probes=2):
        super().__init__()
        self.n_buckets = n_buckets
        self.probes = probes
        self._key = hash_seed.to_bytes(8, "little")
        self.table = nn.Parameter(torch.randn(n_buckets, d_hash), requires_grad=False)
        self.linear = nn.Linear(d_hash, d_model, bias=False)
        nn.init.normal_(self.linear.weight, std=1.0 / d_hash ** 0.5)
        self.linear.requires_grad_(False)
        self._cache = {}

    @staticmethod
    def has_tokens(text):
        return bool(text) and bool(_tokens(text))

    def token_ids(self, text):
        if text not in self._cache:
            words = _tokens(text)
            grams = words + [a + " " + b for a, b in zip(words, words[1:])]
            self._cache[text] = [b for g in grams for b in _buckets(g, self.n_buckets, self._key, self.probes)]
        return self._cache[text]

    def forward(self, texts):
        if isinstance(texts, str):
            return self.forward([texts])[0]
        rows = []
        for text in texts:
            if not text or not _tokens(text):
                raise ValidationError("cannot encode empty text")
            ids = torch.tensor(self.token_ids(text), dtype=torch.long)
            rows.append(self.table[ids].mean(dim=0))
        with torch.no_grad():
            return self.linear(torch.stack(rows))


class ExternalDescriptionClient:
    """Fetches descriptions over HTTP and caches them on disk.

    Request: ``POST {"label": ...}``; response: ``{"description": ...}``.
    The cache is an append-only JSON-lines file of ``{label_hash, description}``.
    """

    def __init__(self, endpoint, timeout=10.0, retries=1, cache_path=None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.cache_path = Path(cache_path) if cache_path else None
        self.network_calls = 0
        self._lock = threading.Lock()
        self._cache = {}
        if self.cache_path and self.cache_path.exists():
            for line in self.cache_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._cache[rec["label_hash"]] = rec["description"]

    @staticmethod
    def label_hash(label):
        return hashlib.sha256(label.encode("utf-8")).hexdigest()

    def fetch(self, label):
        key = self.label_hash(label)
        if key in self._cache:
            return self._cache[key]
        body = json.dumps({"label": label}).encode("utf-8")
        last = None
        for _ in range(max(1, self.retries)):
            request = urllib.request.Request(self.endpoint, data=body, method="POST",
                                             headers={"Content-Type": "application/json"})
            try:
                self.network_calls += 1
                with urllib.request.urlopen(request, timeout=self.timeout) as response:
                    description = json.loads(response.read().decode("utf-8"))["description"]
                break
            except (urllib.error.URLError, OSError, TimeoutError, KeyError, ValueError) as exc:
                last = exc
        else:
            raise TransportError(f"description service at {self.endpoint} failed: {last}")
        with self._lock:
            self._cache[key] = description
            if self.cache_path:
                with self.cache_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"label_hash": key, "description": description}) + "\n")
        return description


class DescriptionExpander:
    def __init__(self, mode="template", template=DEFAULT_TEMPLATE, client=None):
        if mode not in ("template", "external"):
            raise ValidationError(f"unknown expander mode {mode!r}", field="mode")
        if mode == "external" and client is None:
            raise ValidationError("external mode needs a client", field="client")
        if "{label}" not in template:
            raise ValidationError("template must contain a {label} slot", field="template")
        self.mode = mode
        self.template = template
        self.client = client

    def expand(self, label: str) -> str:
        if not label or not label.strip():
            raise ValidationError("label must be nonempty", field="label")
        if self.mode == "external":
            return self.client.fetch(label)
        return self.template.replace("{label}", label)
