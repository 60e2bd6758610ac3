"""Objective metrics: DTW, MCD, F0 RMSE/correlation, frame disturbance, SECS/AECS.

Metric report layout (comma separated, fixed column order)::

    pair_id,accent,speaker,n_gen,n_ref,mcd_db,f0_rmse_hz,f0_corr,fd_frames,secs,aecs

followed by one ``#aggregate`` footer line holding column means (empty cells
are missing values, e.g. an undefined correlation).
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .signal import F0Track

logger = logging.getLogger(__name__)

MCD_CONST = 10.0 / math.log(10.0)
REPORT_COLUMNS = ("pair_id", "accent", "speaker", "n_gen", "n_ref", "mcd_db", "f0_rmse_hz",
                  "f0_corr", "fd_frames", "secs", "aecs")


@dataclass(frozen=True)
class AlignmentPath:
    pairs: tuple[tuple[int, int], ...]
    cost: float

    @property
    def i(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs])

    @property
    def j(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs])

    def validate(self, m: int, n: int) -> None:
        if self.pairs[0] != (0, 0) or self.pairs[-1] != (m - 1, n - 1):
            raise ValueError("path must run from (0, 0) to (m-1, n-1)")
        for (a, b), (c, d) in zip(self.pairs, self.pairs[1:]):
            if (c - a, d - b) not in ((1, 0), (0, 1), (1, 1)):
                raise ValueError(f"illegal step {(a, b)} -> {(c, d)}")


def _as_frames(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def dtw_align(a, b) -> AlignmentPath:
    """Minimal-cost monotone alignment, steps (1,0), (0,1), (1,1), Euclidean frame cost.

    Ties prefer the diagonal step, then the step advancing ``a``.
    """
    a, b = _as_frames(a), _as_frames(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("DTW needs non-empty sequences")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    m, n = len(a), len(b)
    dist = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    acc = np.full((m + 1, n + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            acc[i, j] = dist[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    i, j = m, n
    pairs = [(m - 1, n - 1)]
    while (i, j) != (1, 1):
        options = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j),
                   (acc[i, j - 1], i, j - 1))
        best = min(o[0] for o in options)
        _, i, j = next(o for o in options if o[0] == best)
        pairs.append((i - 1, j - 1))
    return AlignmentPath(tuple(reversed(pairs)), float(acc[m, n]))


def mcd(cep_a, cep_b, path: AlignmentPath) -> float:
    """Mean over path points of (10 / ln 10) * sqrt(2 * sum_d (c_a[d] - c_b[d])^2), in dB."""
    a, b = _as_frames(cep_a), _as_frames(cep_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"cepstral dims differ: {a.shape[1]} vs {b.shape[1]}")
    diff = a[path.i] - b[path.j]
    return float(np.mean(MCD_CONST * np.sqrt(2.0 * (diff ** 2).sum(-1))))


def pearson(x, y) -> float | None:
    """Pearson correlation, or ``None`` when either input has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return None
    return float(np.clip((dx @ dy) / denom, -1.0, 1.0))


@dataclass(frozen=True)
class F0Scores:
    rmse: float
    correlation: float | None

    @property
    def correlation_defined(self) -> bool:
        return self.correlation is not None


def f0_metrics(f0_a: F0Track, f0_b: F0Track, path: AlignmentPath,
               voiced_only: bool = False) -> F0Scores:
    """F0 RMSE (Hz) and Pearson correlation over aligned frame pairs.

    Unvoiced frames count as 0 Hz; ``voiced_only`` restricts to pairs voiced on
    both sides.
    """
    i, j = path.i, path.j
    if i.max() >= len(f0_a.f0) or j.max() >= len(f0_b.f0):
        raise ValueError("F0 tracks do not cover the aligned frames")
    x, y = f0_a.f0[i], f0_b.f0[j]
    if voiced_only:
        keep = f0_a.voiced[i] & f0_b.voiced[j]
        x, y = x[keep], y[keep]
        if x.size == 0:
            return F0Scores(float("nan"), None)
    rmse = float(np.sqrt(np.mean((x - y) ** 2)))
    corr = pearson(x, y)
    if corr is None:
        logger.info("f0 correlation undefined (zero-variance track)")
    return F0Scores(rmse, corr)


def frame_disturbance(path: AlignmentPath) -> float:
    """Root-mean-square of ``i - j`` along the path, in frames."""
    d = path.i - path.j
    return float(np.sqrt(np.mean(d.astype(np.float64) ** 2)))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def aecs_report(groups: dict[str, Sequence]) -> dict[str, float]:
    """Per-group mean cosine similarity over all unordered within-group pairs."""
    out = {}
    for key, vectors in groups.items():
        vectors = list(vectors)
        if len(vectors) < 2:
            raise ValueError(f"group {key!r} needs at least two embeddings")
        sims = [cosine_similarity(u, v) for u, v in itertools.combinations(vectors, 2)]
        out[key] = float(np.mean(sims))
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class PairMetrics:
    pair_id: str
    accent: str
    speaker: str
    n_gen: int
    n_ref: int
    mcd_db: float
    f0_rmse_hz: float
    f0_corr: float | None
    fd_frames: float
    secs: float | None = None
    aecs: float | None = None


@dataclass
class MetricReport:
    pairs: list[PairMetrics] = field(default_factory=list)
    aecs_by_accent: dict[str, float] = field(default_factory=dict)

    def aggregate(self) -> dict[str, float | None]:
        agg = {}
        for col in ("mcd_db", "f0_rmse_hz", "f0_corr", "fd_frames", "secs", "aecs"):
            vals = [getattr(p, col) for p in self.pairs if getattr(p, col) is not None]
            vals = [v for v in vals if not (isinstance(v, float) and math.isnan(v))]
            agg[col] = float(np.mean(vals)) if vals else None
        return agg

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for p in self.pairs:
            w.writerow([_fmt(getattr(p, c)) for c in REPORT_COLUMNS])
        agg = self.aggregate()
        w.writerow(["#aggregate", "", "", "", ""] + [_fmt(agg[c]) for c in REPORT_COLUMNS[5:]])
        for accent, value in sorted(self.aecs_by_accent.items()):
            w.writerow([f"#aecs:{accent}", "", "", "", "", "", "", "", "", "", _fmt(value)])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def evaluate_pair(pair_id: str, accent: str, speaker: str, gen_mel, ref_mel,
                  gen_f0: F0Track | None = None, ref_f0: F0Track | None = None,
                  secs: float | None = None) -> tuple[PairMetrics, AlignmentPath]:
    from .signal import mel_cepstrum

    cg, cr = mel_cepstrum(gen_mel), mel_cepstrum(ref_mel)
    path = dtw_align(cg, cr)
    if gen_f0 is not None and ref_f0 is not None:
        f0 = f0_metrics(gen_f0, ref_f0, path)
        rmse, corr = f0.rmse, f0.correlation
    else:
        rmse, corr = float("nan"), None
    m = PairMetrics(pair_id, accent, speaker, len(cg), len(cr), mcd(cg, cr, path), rmse, corr,
                    frame_disturbance(path), secs)
    return m, path


# ---------------------------------------------------------------------------
# embedding export


def write_embeddings_csv(rows: Iterable[tuple[str, str, str, np.ndarray]], path) -> Path:
    """Header ``id,speaker,accent,e0..e{D-1}``; rows sorted by id, float32 values as %.8g."""
    rows = sorted(rows, key=lambda r: r[0])
    dim = len(rows[0][3]) if rows else 0
    lines = [",".join(["id", "speaker", "accent"] + [f"e{k}" for k in range(dim)])]
    for uid, speaker, accent, vec in rows:
        vals = ",".join(f"{float(v):.8g}" for v in np.asarray(vec, dtype=np.float32))
        lines.append(f"{uid},{speaker},{accent},{vals}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_embeddings_csv(path) -> list[tuple[str, str, str, np.ndarray]]:
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            out.append((row[0], row[1], row[2], np.array([float(v) for v in row[3:]])))
    return out


def export_embeddings(ckpt, manifest, which: str = "global", path=None):
    """One row per utterance of ``manifest``: id, speaker, accent and the embedding.

    ``which`` is ``"global"`` (H_G) or ``"local-mean"`` (phoneme-mean of H_L).
    """
    from .training import embed_utterance, stage1_from_checkpoint

    if which not in ("global", "local-mean"):
        raise ValueError(f"unknown embedding kind {which!r}")
    model = stage1_from_checkpoint(ckpt)
    rows = []
    for u in manifest:
        hg, hl = embed_utterance(model, u)
        rows.append((u.id, u.speaker, u.accent, hg if which == "global" else hl.mean(0)))
    rows.sort(key=lambda r: r[0])
    if path is not None:
        write_embeddings_csv(rows, path)
    return rows


# ---------------------------------------------------------------------------
# probes and the reference accent classifier


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    chance: float
    n_train: int
    n_test: int


def linear_probe(train_x, train_y, test_x, test_y, seed: int = 0) -> ProbeResult:
    """Fit a fresh multinomial logistic regression and score held-out accuracy."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    scaler = StandardScaler().fit(train_x)
    clf = LogisticRegression(max_iter=5000, C=1.0, random_state=seed)
    clf.fit(scaler.transform(train_x), train_y)
    acc = float(np.mean(clf.predict(scaler.transform(test_x)) == np.asarray(test_y)))
    n_classes = len(set(train_y) | set(test_y))
    return ProbeResult(acc, 1.0 / n_classes, len(train_y), len(test_y))


class ReferenceAccentClassifier:
    """Accent classifier trained on ground-truth mels, independent of the TTS model.

    Each mel is mean-normalised per mel bin over time (removing any constant
    spectral offset such as a speaker tilt), then passed through a small conv
    net with temporal average and max pooling.
    """

    def __init__(self, n_accents: int, channels: int = 64, seed: int = 0):
        import torch
        from torch import nn

        torch.manual_seed(seed)
        self.seed = seed
        self.net = nn.Sequential(
            nn.Conv1d(80, channels, 5, padding=2), nn.ReLU(),
            nn.Conv1d(channels, channels, 5, padding=2), nn.ReLU(),
        )
        self.head = nn.Linear(2 * channels, n_accents)

    @staticmethod
    def _features(mel):
        import torch

        x = torch.as_tensor(np.asarray(mel, dtype=np.float32))
        return (x - x.mean(0, keepdim=True)).T.unsqueeze(0)

    def _logits(self, mel):
        import torch

        h = self.net(self._features(mel))
        return self.head(torch.cat([h.mean(-1), h.amax(-1)], -1))

    def fit(self, mels: Sequence[np.ndarray], labels: Sequence[int], epochs: int = 30,
            lr: float = 2e-3, noise: float = 0.1):
        import torch

        params = list(self.net.parameters()) + list(self.head.parameters())
        opt = torch.optim.Adam(params, lr=lr)
        gen = np.random.default_rng(self.seed)
        for _ in range(epochs):
            for k in gen.permutation(len(mels)):
                mel = mels[k] + noise * gen.standard_normal(mels[k].shape).astype(np.float32)
                loss = torch.nn.functional.cross_entropy(
                    self._logits(mel), torch.tensor([int(labels[k])])
                )
                opt.zero_grad()
                loss.backward()
                opt.step()
        return self

    def predict(self, mel) -> int:
        import torch

        with torch.no_grad():
            return int(self._logits(mel).argmax(-1))

    def accuracy(self, mels, labels) -> float:
        return float(np.mean([self.predict(m) == int(y) for m, y in zip(mels, labels)]))
