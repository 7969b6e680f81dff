"""On-disk vector store of past runs for the retrieval loop.

Embeddings are hashed token frequencies (deterministic, offline); search is
exact brute-force cosine. One directory per run holds the original bundle
files, metrics, scores, and the user evaluation text; a store-level index maps
run id to embedding.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StoreError

EMBED_DIM = 256

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


def embed(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Hashed token-count embedding, L2-normalized. Empty-after-tokenization
    text is an error (the zero vector would break the normalization invariant)."""
    tokens = [t for t in _TOKEN_SPLIT.split(text.lower()) if t]
    if not tokens:
        raise StoreError("EMPTY_TEXT", "nothing to embed after tokenization")
    v = np.zeros(dim)
    for tok in tokens:
        bucket = int.from_bytes(hashlib.sha256(tok.encode()).digest()[:8], "little") % dim
        v[bucket] += 1.0
    return v / np.linalg.norm(v)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))


@dataclass
class RunArtifact:
    run_id: str
    prompt: str
    files: dict  # relative path -> text (workflow + per-stage yaml files)
    metrics_jsonl: str = ""
    scores: dict = field(default_factory=dict)
    evaluation: str = ""
    created_at: str = ""

    @property
    def embed_text(self) -> str:
        # the prompt plus the user evaluation drive retrieval; files are payload
        return f"{self.prompt}\n{self.evaluation}".strip()


class VectorStore:
    """Many readers, single writer; index updates are write-temp-then-rename."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.json"
        self._index = self._load_index()

    def _load_index(self) -> dict:
        if self.index_path.is_file():
            return json.loads(self.index_path.read_text())
        return {"dim": EMBED_DIM, "runs": {}}

    def _write_index(self):
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        with os.fdopen(fd, "w") as f:
            json.dump(self._index, f, indent=1, sort_keys=True)
        os.replace(tmp, self.index_path)

    def __len__(self):
        return len(self._index["runs"])

    def run_ids(self) -> list[str]:
        return sorted(self._index["runs"], key=lambda r: self._index["runs"][r]["order"])

    def add_run(self, artifact: RunArtifact) -> str:
        if artifact.run_id in self._index["runs"]:
            raise StoreError("DUPLICATE_ID", f"run id {artifact.run_id!r} already stored")
        vec = embed(artifact.embed_text)
        run_dir = self.root / "runs" / artifact.run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        for rel, text in artifact.files.items():
            dest = run_dir / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_text(text)
        (run_dir / "metrics.jsonl").write_text(artifact.metrics_jsonl)
        (run_dir / "scores.json").write_text(json.dumps(artifact.scores, indent=2))
        (run_dir / "evaluation.txt").write_text(artifact.evaluation)
        (run_dir / "prompt.txt").write_text(artifact.prompt)
        self._index["runs"][artifact.run_id] = {
            "embedding": vec.tolist(),
            "order": len(self._index["runs"]),
            "created_at": artifact.created_at,
        }
        self._write_index()
        return artifact.run_id

    def get_run(self, run_id: str) -> RunArtifact:
        if run_id not in self._index["runs"]:
            raise StoreError("EMPTY_STORE", f"no run {run_id!r}")
        run_dir = self.root / "runs" / run_id
        files = {}
        for p in sorted(run_dir.rglob("*")):
            if p.is_file() and p.name not in (
                "metrics.jsonl", "scores.json", "evaluation.txt", "prompt.txt",
            ):
                files[str(p.relative_to(run_dir))] = p.read_text()
        scores_file = run_dir / "scores.json"
        return RunArtifact(
            run_id=run_id,
            prompt=(run_dir / "prompt.txt").read_text(),
            files=files,
            metrics_jsonl=(run_dir / "metrics.jsonl").read_text(),
            scores=json.loads(scores_file.read_text()) if scores_file.is_file() else {},
            evaluation=(run_dir / "evaluation.txt").read_text(),
            created_at=self._index["runs"][run_id].get("created_at", ""),
        )

    def query_topk(self, text: str, k: int = 3) -> list[tuple[str, float]]:
        """Exact cosine search, best first; ties broken by older run first."""
        if k < 1:
            raise StoreError("EMPTY_STORE", "k must be >= 1")
        if not self._index["runs"]:
            raise StoreError("EMPTY_STORE", "the store holds no runs")
        q = embed(text)
        scored = [
            (rid, cosine(q, np.asarray(meta["embedding"])), meta["order"])
            for rid, meta in self._index["runs"].items()
        ]
        scored.sort(key=lambda t: (-t[1], t[2]))
        return [(rid, score) for rid, score, _ in scored[:k]]
