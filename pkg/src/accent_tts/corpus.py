"""Corpus ingestion, splitting, speaker embeddings and the synthetic accented corpus.

On-disk layouts (all little-endian):

* manifest: UTF-8 JSON lines, one utterance per line, keys in this order:
  ``id, speaker, accent, phonemes, boundaries, mel, split``.  ``phonemes`` is a
  space separated symbol string, ``boundaries`` a list of ``"start:end"``
  strings (half-open frame intervals), ``mel`` a path relative to the manifest.
* mel file: ``b"MEL1"`` + uint32 rows + uint32 cols + rows*cols float32, row-major.
* speaker embedding file: ``b"SPK1"`` + uint32 count, then per entry
  uint16 id length, id bytes (UTF-8), 256 float32.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

N_MELS = 80
SPEAKER_DIM = 256
DEFAULT_ACCENTS = ("AR", "ZH", "HI", "KO", "ES", "VI")
SPLITS = ("train", "val", "test")

MEL_MAGIC = b"MEL1"
SPK_MAGIC = b"SPK1"


class CorpusError(ValueError):
    """Raised for malformed corpus files or records."""


# ---------------------------------------------------------------------------
# phoneme inventory


ARPABET = (
    "AA AE AH AO AW AX AY B CH D DH EH ER EY F G HH IH IY JH K L M N NG OW OY P R S SH T "
    "TH UH UW V W Y Z ZH"
).split()


@dataclass(frozen=True)
class PhonemeInventory:
    """Ordered phoneme symbol table; index 0 is padding, index 1 unknown."""

    symbols: tuple[str, ...]
    pad: str = "<pad>"
    unk: str = "<unk>"

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise CorpusError("phoneme symbols must be unique")
        if self.pad in self.symbols or self.unk in self.symbols:
            raise CorpusError("sentinel symbols collide with phoneme symbols")
        if self.pad == self.unk:
            raise CorpusError("pad and unk sentinels must differ")

    @classmethod
    def arpabet(cls) -> "PhonemeInventory":
        return cls(tuple(ARPABET))

    @classmethod
    def abstract(cls, n: int) -> "PhonemeInventory":
        return cls(tuple(f"p{i}" for i in range(n)))

    @property
    def pad_index(self) -> int:
        return 0

    @property
    def unk_index(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.symbols) + 2

    def index(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol) + 2
        except ValueError:
            return self.unk_index

    def encode(self, symbols: Iterable[str]) -> list[int]:
        return [self.index(s) for s in symbols]

    def decode(self, indices: Iterable[int]) -> list[str]:
        table = (self.pad, self.unk) + self.symbols
        return [table[i] for i in indices]


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker: str
    accent: str
    phonemes: tuple[int, ...]
    boundaries: tuple[tuple[int, int], ...]
    mel: np.ndarray = field(repr=False, compare=False)
    mel_path: str | None = None
    split: str | None = None
    waveform_path: str | None = None

    @property
    def n_frames(self) -> int:
        return int(self.mel.shape[0])

    def validate(self) -> None:
        check_utterance(self.id, self.phonemes, self.boundaries, self.mel)


def check_utterance(uid, phonemes, boundaries, mel) -> None:
    if len(phonemes) < 1:
        raise CorpusError(f"{uid}: empty phoneme sequence")
    if mel.ndim != 2 or mel.shape[1] != N_MELS:
        raise CorpusError(f"{uid}: mel must have {N_MELS} columns, got shape {mel.shape}")
    if len(boundaries) != len(phonemes):
        raise CorpusError(
            f"{uid}: {len(boundaries)} boundaries for {len(phonemes)} phonemes"
        )
    check_boundaries(boundaries, mel.shape[0], uid)


def check_boundaries(boundaries, n_frames: int, uid: str = "<utterance>") -> None:
    """Boundaries must tile ``[0, n_frames)`` with non-empty, sorted intervals."""
    prev_end = 0
    for start, end in boundaries:
        if start != prev_end:
            raise CorpusError(f"{uid}: boundary gap/overlap at frame {start} (expected {prev_end})")
        if end <= start:
            raise CorpusError(f"{uid}: empty or reversed boundary ({start}, {end})")
        prev_end = end
    if prev_end != n_frames:
        raise CorpusError(
            f"{uid}: boundary mismatch, last boundary ends at {prev_end} but mel has {n_frames} frames"
        )


@dataclass(frozen=True)
class Manifest:
    utterances: tuple[Utterance, ...]
    inventory: PhonemeInventory
    accents: tuple[str, ...] = DEFAULT_ACCENTS
    speakers: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.utterances:
            raise CorpusError("empty manifest")
        if not self.speakers:
            object.__setattr__(
                self, "speakers", tuple(sorted({u.speaker for u in self.utterances}))
            )
        speaker_accent: dict[str, str] = {}
        for u in self.utterances:
            if u.accent not in self.accents:
                raise CorpusError(f"{u.id}: accent {u.accent!r} not in label set")
            if u.speaker not in self.speakers:
                raise CorpusError(f"{u.id}: speaker {u.speaker!r} not in label set")
            seen = speaker_accent.setdefault(u.speaker, u.accent)
            if seen != u.accent:
                raise CorpusError(
                    f"{u.id}: speaker {u.speaker} appears with accents {seen} and {u.accent}"
                )

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def accent_index(self, accent: str) -> int:
        return self.accents.index(accent)

    def speaker_index(self, speaker: str) -> int:
        return self.speakers.index(speaker)

    def speaker_accent(self, speaker: str) -> str:
        for u in self.utterances:
            if u.speaker == speaker:
                return u.accent
        raise KeyError(speaker)

    def subset(self, split: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == split]

    def by_id(self, uid: str) -> Utterance:
        for u in self.utterances:
            if u.id == uid:
                return u
        raise KeyError(uid)


# ---------------------------------------------------------------------------
# binary matrix files


def write_matrix(path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise CorpusError(f"expected a 2-D matrix, got shape {matrix.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MEL_MAGIC)
        f.write(struct.pack("<II", *matrix.shape))
        f.write(matrix.tobytes())


def read_matrix(path, cols: int | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MEL_MAGIC:
        raise CorpusError(f"{path}: not a MEL1 file")
    rows, ncols = struct.unpack("<II", data[4:12])
    if cols is not None and ncols != cols:
        raise CorpusError(f"{path}: expected {cols} columns, header says {ncols}")
    body = data[12:]
    if len(body) != rows * ncols * 4:
        raise CorpusError(f"{path}: payload size does not match header {rows}x{ncols}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, ncols).astype(np.float32)


def write_mel(path, mel: np.ndarray) -> None:
    if mel.ndim != 2 or mel.shape[1] != N_MELS:
        raise CorpusError(f"mel must be T x {N_MELS}, got {mel.shape}")
    write_matrix(path, mel)


def read_mel(path) -> np.ndarray:
    return read_matrix(path, cols=N_MELS)


# ---------------------------------------------------------------------------
# manifest io


def _parse_boundary(token: str) -> tuple[int, int]:
    try:
        s, e = token.split(":")
        return int(s), int(e)
    except ValueError as exc:
        raise CorpusError(f"bad boundary token {token!r}") from exc


def load_manifest(
    path,
    inventory: PhonemeInventory | None = None,
    accents: Sequence[str] | None = None,
) -> Manifest:
    """Load and validate a JSON-lines manifest; mel files are read eagerly.

    When ``inventory`` is omitted, a sidecar ``inventory.json`` next to the
    manifest is used if present, else the ARPAbet default.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    sidecar = root / "inventory.json"
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    if inventory is None:
        inventory = PhonemeInventory(tuple(meta["symbols"])) if meta else PhonemeInventory.arpabet()
    if accents is None:
        accents = tuple(meta.get("accents", DEFAULT_ACCENTS))

    utterances = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                uid = rec["id"]
                mel_rel = rec["mel"]
                symbols = rec["phonemes"].split()
                boundaries = tuple(_parse_boundary(b) for b in rec["boundaries"])
                speaker, accent = rec["speaker"], rec["accent"]
            except (KeyError, TypeError, AttributeError, json.JSONDecodeError) as exc:
                raise CorpusError(f"{path}:{lineno}: schema violation ({exc})") from exc
            unknown = [s for s in symbols if inventory.index(s) == inventory.unk_index]
            if unknown:
                raise CorpusError(f"{uid}: unknown phonemes {unknown}")
            split = rec.get("split")
            if split is not None and split not in SPLITS:
                raise CorpusError(f"{uid}: unknown split tag {split!r}")
            mel_file = root / mel_rel
            if not mel_file.exists():
                raise CorpusError(f"{uid}: mel file missing: {mel_file}")
            mel = read_mel(mel_file)
            phonemes = tuple(inventory.encode(symbols))
            check_utterance(uid, phonemes, boundaries, mel)
            utterances.append(
                Utterance(uid, speaker, accent, phonemes, boundaries, mel, mel_rel, split,
                          rec.get("waveform"))
            )
    if not utterances:
        raise CorpusError("empty manifest")
    return Manifest(tuple(utterances), inventory, tuple(accents))


def save_manifest(manifest: Manifest, path, write_mels: bool = True) -> Path:
    """Write ``manifest`` as JSON lines plus the inventory sidecar and mel files."""
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in manifest.utterances:
        mel_rel = u.mel_path or f"mels/{u.id}.mel"
        if write_mels:
            write_mel(root / mel_rel, u.mel)
        rec = {
            "id": u.id,
            "speaker": u.speaker,
            "accent": u.accent,
            "phonemes": " ".join(manifest.inventory.decode(u.phonemes)),
            "boundaries": [f"{s}:{e}" for s, e in u.boundaries],
            "mel": mel_rel,
            "split": u.split,
        }
        lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    sidecar = {"symbols": list(manifest.inventory.symbols), "accents": list(manifest.accents)}
    (root / "inventory.json").write_text(json.dumps(sidecar, indent=1) + "\n")
    return path


def prepare_corpus(source, out_path, params=None, trim_db: float = 0.0,
                   inventory: PhonemeInventory | None = None,
                   accents: Sequence[str] | None = None) -> Manifest:
    """Turn a source manifest into a mel corpus written at ``out_path``.

    Source records use the manifest keys, with ``waveform`` (a 16 kHz WAV path
    relative to the source file) in place of, or alongside, ``mel``. Waveforms
    are optionally silence-trimmed (``trim_db`` < 0 enables it) and converted
    to log-mel frames; boundaries must then match the resulting frame count.
    """
    from .signal import MelParams, compute_mel, read_wav, trim_silence

    params = params or MelParams()
    source = Path(source)
    if not source.exists():
        raise FileNotFoundError(f"source manifest not found: {source}")
    inventory = inventory or PhonemeInventory.arpabet()
    accents = tuple(accents or DEFAULT_ACCENTS)
    utterances = []
    for lineno, line in enumerate(source.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            uid, speaker, accent = rec["id"], rec["speaker"], rec["accent"]
            symbols = rec["phonemes"].split()
            boundaries = tuple(_parse_boundary(b) for b in rec["boundaries"])
        except (KeyError, TypeError, AttributeError, json.JSONDecodeError) as exc:
            raise CorpusError(f"{source}:{lineno}: schema violation ({exc})") from exc
        wav_rel = rec.get("waveform")
        if wav_rel is not None:
            wav = read_wav(source.parent / wav_rel, params.sample_rate)
            if trim_db < 0:
                trimmed = trim_silence(wav, trim_db, frame_length=params.win_length,
                                       hop_length=params.hop_length)
                if trimmed.all_silent:
                    raise CorpusError(f"{uid}: waveform is entirely silent")
                wav = trimmed.waveform
            mel = compute_mel(wav, params)
        elif "mel" in rec:
            mel = read_mel(source.parent / rec["mel"])
        else:
            raise CorpusError(f"{uid}: record has neither 'waveform' nor 'mel'")
        unknown = [s for s in symbols if inventory.index(s) == inventory.unk_index]
        if unknown:
            raise CorpusError(f"{uid}: unknown phonemes {unknown}")
        phonemes = tuple(inventory.encode(symbols))
        check_utterance(uid, phonemes, boundaries, mel)
        utterances.append(Utterance(uid, speaker, accent, phonemes, boundaries,
                                    np.asarray(mel, dtype=np.float32), f"mels/{uid}.mel",
                                    rec.get("split"), wav_rel))
    if not utterances:
        raise CorpusError("empty manifest")
    manifest = Manifest(tuple(utterances), inventory, accents)
    save_manifest(manifest, out_path)
    return manifest


# ---------------------------------------------------------------------------
# splitting


def split_dataset(
    manifest: Manifest, val_per_speaker: int, test_per_speaker: int, seed: int
) -> Manifest:
    """Tag exactly ``val``/``test`` utterances per speaker, the rest ``train``."""
    if val_per_speaker < 0 or test_per_speaker < 0:
        raise CorpusError("split counts must be non-negative")
    tags: dict[str, str] = {}
    for s_idx, speaker in enumerate(manifest.speakers):
        ids = sorted(u.id for u in manifest.utterances if u.speaker == speaker)
        needed = val_per_speaker + test_per_speaker
        if needed and len(ids) <= needed:
            raise CorpusError(
                f"speaker {speaker} has {len(ids)} utterances, needs more than {needed}"
            )
        order = np.random.default_rng([seed, s_idx]).permutation(len(ids))
        for rank, i in enumerate(order):
            if rank < val_per_speaker:
                tags[ids[i]] = "val"
            elif rank < needed:
                tags[ids[i]] = "test"
            else:
                tags[ids[i]] = "train"
    utts = tuple(replace(u, split=tags[u.id]) for u in manifest.utterances)
    return replace(manifest, utterances=utts)


# ---------------------------------------------------------------------------
# speaker embeddings


@dataclass(frozen=True)
class SpeakerEmbeddingTable:
    vectors: dict[str, np.ndarray]

    def __post_init__(self):
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) > 1:
            raise CorpusError(f"speaker embeddings have mixed shapes {sorted(dims)}")
        for sid, v in self.vectors.items():
            if not np.all(np.isfinite(v)):
                raise CorpusError(f"speaker {sid}: non-finite embedding component")

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).shape[0]

    def __getitem__(self, speaker: str) -> np.ndarray:
        try:
            return self.vectors[speaker]
        except KeyError:
            raise KeyError(f"unknown speaker {speaker!r}") from None

    def __contains__(self, speaker) -> bool:
        return speaker in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)


def save_speaker_embeddings(table: SpeakerEmbeddingTable, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(SPK_MAGIC)
        f.write(struct.pack("<I", len(table.vectors)))
        for sid in sorted(table.vectors):
            vec = np.asarray(table.vectors[sid], dtype="<f4")
            if vec.shape != (SPEAKER_DIM,):
                raise CorpusError(f"speaker {sid}: expected {SPEAKER_DIM} dims, got {vec.shape}")
            raw = sid.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(vec.tobytes())


def load_speaker_embeddings(path) -> SpeakerEmbeddingTable:
    data = Path(path).read_bytes()
    if data[:4] != SPK_MAGIC:
        raise CorpusError(f"{path}: not a SPK1 file")
    (count,) = struct.unpack_from("<I", data, 4)
    offset = 8
    vectors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(data):
            raise CorpusError(f"{path}: truncated entry header")
        (n,) = struct.unpack_from("<H", data, offset)
        offset += 2
        sid = data[offset:offset + n].decode("utf-8")
        offset += n
        nbytes = SPEAKER_DIM * 4
        if offset + nbytes > len(data):
            raise CorpusError(f"{path}: speaker {sid}: dimension mismatch (truncated vector)")
        vec = np.frombuffer(data[offset:offset + nbytes], dtype="<f4").astype(np.float32)
        offset += nbytes
        if sid in vectors:
            raise CorpusError(f"{path}: duplicate speaker id {sid!r}")
        if not np.all(np.isfinite(vec)):
            raise CorpusError(f"{path}: speaker {sid}: non-finite embedding component")
        vectors[sid] = vec
    if offset != len(data):
        raise CorpusError(f"{path}: dimension mismatch ({len(data) - offset} trailing bytes)")
    return SpeakerEmbeddingTable(vectors)


# ---------------------------------------------------------------------------
# synthetic corpus

PITCH_OFFSETS = np.arange(-2, 3)
DURATION_MULTIPLIERS = np.round(np.arange(0.6, 1.61, 0.2), 2)
BAND_HALF_WIDTH = 3


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Ground-truth generating factors for a synthetic accented corpus.

    ``pitch_offsets[a, p]`` shifts phoneme ``p``'s pitch band by that many mel
    rows under accent ``a``; ``duration_multipliers[a, p]`` scales its base
    duration.  ``speaker_tilts[s]`` is added to every frame of speaker ``s``.
    Use :meth:`build` to draw all tables from a seed.
    """

    n_accents: int
    n_speakers_per_accent: int
    n_utterances_per_speaker: int
    phoneme_count: int
    seed: int
    pitch_offsets: np.ndarray
    duration_multipliers: np.ndarray
    speaker_tilts: np.ndarray
    noise_scale: float = 0.05
    min_phonemes: int = 4
    max_phonemes: int = 8
    band_amplitude: float = 6.0

    def __post_init__(self):
        for name in ("n_accents", "n_speakers_per_accent", "n_utterances_per_speaker",
                     "phoneme_count"):
            if getattr(self, name) <= 0:
                raise CorpusError(f"{name} must be positive")
        if self.n_accents > len(DEFAULT_ACCENTS):
            raise CorpusError(f"at most {len(DEFAULT_ACCENTS)} accents supported")
        shape = (self.n_accents, self.phoneme_count)
        if self.pitch_offsets.shape != shape or self.duration_multipliers.shape != shape:
            raise CorpusError(f"accent factor tables must have shape {shape}")
        if self.speaker_tilts.shape != (self.n_speakers, N_MELS):
            raise CorpusError(f"speaker_tilts must have shape ({self.n_speakers}, {N_MELS})")
        if not 1 <= self.min_phonemes <= self.max_phonemes:
            raise CorpusError("need 1 <= min_phonemes <= max_phonemes")

    @property
    def n_speakers(self) -> int:
        return self.n_accents * self.n_speakers_per_accent

    @property
    def accents(self) -> tuple[str, ...]:
        return DEFAULT_ACCENTS[: self.n_accents]

    @property
    def speakers(self) -> tuple[str, ...]:
        return tuple(
            f"{a}{k}" for a in self.accents for k in range(self.n_speakers_per_accent)
        )

    def check_distinct_accents(self) -> None:
        for a in range(self.n_accents):
            for b in range(a + 1, self.n_accents):
                if (np.array_equal(self.pitch_offsets[a], self.pitch_offsets[b])
                        and np.array_equal(self.duration_multipliers[a],
                                           self.duration_multipliers[b])):
                    raise CorpusError(f"accents {a} and {b} have identical factor tables")

    @classmethod
    def build(
        cls,
        n_accents: int = 4,
        n_speakers_per_accent: int = 3,
        n_utterances_per_speaker: int = 20,
        phoneme_count: int = 10,
        seed: int = 0,
        noise_scale: float = 0.05,
        tilt_scale: float = 1.0,
        **kwargs,
    ) -> "SyntheticCorpusSpec":
        if min(n_accents, n_speakers_per_accent, n_utterances_per_speaker, phoneme_count) <= 0:
            raise CorpusError("synthetic corpus counts must be positive")
        rng = np.random.default_rng([seed, 1])
        n_speakers = n_accents * n_speakers_per_accent
        while True:
            offsets = rng.choice(PITCH_OFFSETS, size=(n_accents, phoneme_count))
            mults = rng.choice(DURATION_MULTIPLIERS, size=(n_accents, phoneme_count))
            spec = cls(n_accents, n_speakers_per_accent, n_utterances_per_speaker,
                       phoneme_count, seed, offsets, mults,
                       _speaker_tilts(rng, n_speakers, tilt_scale), noise_scale, **kwargs)
            try:
                spec.check_distinct_accents()
                return spec
            except CorpusError:
                continue

    def neutral(self) -> "SyntheticCorpusSpec":
        """Same corpus with every accent factor set to its neutral value."""
        return replace(
            self,
            pitch_offsets=np.zeros_like(self.pitch_offsets),
            duration_multipliers=np.ones_like(self.duration_multipliers),
        )


def _speaker_tilts(rng, n_speakers: int, scale: float) -> np.ndarray:
    x = np.linspace(-1.0, 1.0, N_MELS)
    slope = rng.uniform(-1.0, 1.0, size=(n_speakers, 1))
    curve = rng.uniform(-1.0, 1.0, size=(n_speakers, 1))
    level = rng.uniform(-0.5, 0.5, size=(n_speakers, 1))
    return scale * (level + slope * x + curve * (x ** 2 - 1.0 / 3.0))


@dataclass(frozen=True)
class _PhonemeTemplates:
    envelopes: np.ndarray  # phoneme_count x 80
    band_centres: np.ndarray  # phoneme_count
    base_durations: np.ndarray  # phoneme_count


def _templates(spec: SyntheticCorpusSpec) -> _PhonemeTemplates:
    rng = np.random.default_rng([spec.seed, 2])
    rows = np.arange(N_MELS)
    env = np.full((spec.phoneme_count, N_MELS), -4.0)
    for p in range(spec.phoneme_count):
        for _ in range(3):
            centre = rng.uniform(0, N_MELS)
            width = rng.uniform(3.0, 10.0)
            env[p] += rng.uniform(1.0, 3.0) * np.exp(-0.5 * ((rows - centre) / width) ** 2)
        env[p] -= 1.5 * rows / N_MELS
    lo = BAND_HALF_WIDTH + PITCH_OFFSETS.max()
    centres = rng.integers(lo, N_MELS // 2, size=spec.phoneme_count)
    durations = rng.integers(3, 7, size=spec.phoneme_count)
    return _PhonemeTemplates(env, centres, durations)


def _texts(spec: SyntheticCorpusSpec) -> list[np.ndarray]:
    rng = np.random.default_rng([spec.seed, 3])
    texts = []
    for _ in range(spec.n_utterances_per_speaker):
        n = rng.integers(spec.min_phonemes, spec.max_phonemes + 1)
        texts.append(rng.integers(0, spec.phoneme_count, size=n))
    return texts


def band_profile(centre: int) -> np.ndarray:
    """Truncated triangular pitch band around ``centre`` (zero outside +-3 rows)."""
    rows = np.arange(N_MELS)
    dist = np.abs(rows - centre)
    return np.where(dist <= BAND_HALF_WIDTH, 1.0 - dist / (BAND_HALF_WIDTH + 1), 0.0)


def render_synthetic(
    spec: SyntheticCorpusSpec,
    text: Sequence[int],
    accent: int,
    speaker: int,
    noise_key: Sequence[int] | None = None,
    templates: _PhonemeTemplates | None = None,
) -> tuple[np.ndarray, tuple[tuple[int, int], ...]]:
    """Render the mel and boundaries for abstract phoneme ids ``text``.

    Works for any accent/speaker pairing, so it also produces ground truth for
    cross-accent combinations absent from the corpus.
    """
    tpl = templates or _templates(spec)
    frames = []
    boundaries = []
    start = 0
    for p in text:
        dur = max(1, int(round(tpl.base_durations[p] * spec.duration_multipliers[accent, p])))
        centre = tpl.band_centres[p] + spec.pitch_offsets[accent, p]
        row = tpl.envelopes[p] + spec.band_amplitude * band_profile(centre)
        frames.append(np.repeat(row[None, :], dur, axis=0))
        boundaries.append((start, start + dur))
        start += dur
    mel = np.concatenate(frames, axis=0) + spec.speaker_tilts[speaker][None, :]
    if spec.noise_scale > 0:
        key = list(noise_key) if noise_key is not None else [spec.seed, 4, accent, speaker]
        mel = mel + spec.noise_scale * np.random.default_rng(key).standard_normal(mel.shape)
    return mel.astype(np.float32), tuple(boundaries)


def synthetic_text(spec: SyntheticCorpusSpec, index: int) -> np.ndarray:
    return _texts(spec)[index]


def generate_synthetic_corpus(
    spec: SyntheticCorpusSpec,
) -> tuple[Manifest, SpeakerEmbeddingTable]:
    """Generate the corpus described by ``spec``; a pure function of ``spec``."""
    inventory = PhonemeInventory.abstract(spec.phoneme_count)
    tpl = _templates(spec)
    texts = _texts(spec)
    utterances = []
    speakers = spec.speakers
    for s_idx, speaker in enumerate(speakers):
        a_idx = s_idx // spec.n_speakers_per_accent
        for u_idx, text in enumerate(texts):
            mel, boundaries = render_synthetic(
                spec, text, a_idx, s_idx, noise_key=[spec.seed, 5, s_idx, u_idx], templates=tpl
            )
            uid = f"{speaker}_{u_idx:04d}"
            utterances.append(
                Utterance(uid, speaker, spec.accents[a_idx], tuple(int(p) + 2 for p in text),
                          boundaries, mel, f"mels/{uid}.mel")
            )
    manifest = Manifest(tuple(utterances), inventory, spec.accents, speakers)

    rng = np.random.default_rng([spec.seed, 6])
    vecs = rng.standard_normal((len(speakers), SPEAKER_DIM))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    table = SpeakerEmbeddingTable(
        {sid: vecs[i].astype(np.float32) for i, sid in enumerate(speakers)}
    )
    return manifest, table


def save_synthetic_spec(spec: SyntheticCorpusSpec, path) -> None:
    np.savez(
        path,
        counts=np.array([spec.n_accents, spec.n_speakers_per_accent,
                         spec.n_utterances_per_speaker, spec.phoneme_count, spec.seed,
                         spec.min_phonemes, spec.max_phonemes]),
        scales=np.array([spec.noise_scale, spec.band_amplitude]),
        pitch_offsets=spec.pitch_offsets,
        duration_multipliers=spec.duration_multipliers,
        speaker_tilts=spec.speaker_tilts,
    )


def load_synthetic_spec(path) -> SyntheticCorpusSpec:
    with np.load(path) as z:
        c = [int(v) for v in z["counts"]]
        noise, amp = (float(v) for v in z["scales"])
        return SyntheticCorpusSpec(
            c[0], c[1], c[2], c[3], c[4], z["pitch_offsets"], z["duration_multipliers"],
            z["speaker_tilts"], noise, c[5], c[6], amp,
        )
