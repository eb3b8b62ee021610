"""Synthetic planted-moment data, annotation I/O, and dataset statistics.

Each sample is a video of N segment features plus a token-id query. The
answer span carries the blended prototype of the queried concepts; background
segments carry distractor prototypes. With some probability a second span
with the *same* prototype is planted elsewhere and the query gains a
first/last qualifier token, so ranking cannot rely on appearance alone.

Annotations are JSON-lines; features live in a little-endian float32 sidecar
so real benchmark features could be dropped in later:

  <split>.jsonl          one record per sample:
                         {"video_id", "n_segments", "duration_s",
                          "query": [ids], "query_text", "gt": [start, end]}
  <split>.features.bin   magic "MLFEAT01", u32 version, u64 n_samples,
                         then per sample u32 n_segments, u32 d_video,
                         n_segments*d_video float32 values
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MASK_TOKEN_ID = 0
PAD_TOKEN_ID = 1
FIRST_TOKEN_ID = 2
LAST_TOKEN_ID = 3
CONCEPT_BASE_ID = 4

FEATURE_MAGIC = b"MLFEAT01"
FEATURE_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruthSpan:
    start: float
    end: float

    def __post_init__(self):
        if not 0.0 <= self.start <= self.end <= 1.0:
            raise DatasetError(f"invalid span ({self.start}, {self.end})")

    @property
    def width(self) -> float:
        return self.end - self.start

    def as_tuple(self):
        return (self.start, self.end)


@dataclass
class Sample:
    video_id: str
    features: np.ndarray          # (n_segments, d_video) float32
    query: list[int]
    query_text: str
    gt: GroundTruthSpan
    duration_s: float


@dataclass
class GenerationConfig:
    n_segments: int = 64
    d_video: int = 32
    n_concepts: int = 24
    noise_sigma: float = 0.1
    dup_prob: float = 0.3
    width_range: tuple = (0.05, 0.9)
    duration_range: tuple = (20.0, 120.0)
    max_query_concepts: int = 3
    prototype_seed: int = 7

    @property
    def vocab_size(self) -> int:
        return CONCEPT_BASE_ID + self.n_concepts

    def __post_init__(self):
        if self.n_segments < 1 or self.d_video < 1 or self.n_concepts < 2:
            raise DatasetError("degenerate generation config")
        lo, hi = self.width_range
        if not 0.0 < lo <= hi <= 1.0:
            raise DatasetError(f"width range ({lo}, {hi}) infeasible")
        if self.max_query_concepts > self.n_concepts - 1:
            raise DatasetError("need at least one distractor concept")


def token_text(token_id: int) -> str:
    names = {MASK_TOKEN_ID: "<mask>", PAD_TOKEN_ID: "<pad>",
             FIRST_TOKEN_ID: "first", LAST_TOKEN_ID: "last"}
    if token_id in names:
        return names[token_id]
    return f"concept{token_id - CONCEPT_BASE_ID}"


class SyntheticGenerator:
    """Deterministic planted-moment sampler; prototypes are unit vectors fixed
    by the config's prototype seed."""

    def __init__(self, cfg: GenerationConfig):
        self.cfg = cfg
        proto_rng = np.random.default_rng(cfg.prototype_seed)
        protos = proto_rng.standard_normal((cfg.n_concepts, cfg.d_video))
        self.prototypes = protos / np.linalg.norm(protos, axis=1, keepdims=True)

    def _plant_region(self, rng, n: int):
        lo, hi = self.cfg.width_range
        width = rng.uniform(lo, hi)
        w_seg = min(max(1, int(round(width * n))), n)
        start_seg = int(rng.integers(0, n - w_seg + 1))
        return start_seg, w_seg

    def blended_prototype(self, concept_ids) -> np.ndarray:
        return self.prototypes[np.asarray(concept_ids)].mean(axis=0)

    def sample(self, rng: np.random.Generator, video_id: str) -> Sample:
        cfg = self.cfg
        n = cfg.n_segments
        n_query = int(rng.integers(1, cfg.max_query_concepts + 1))
        concept_ids = rng.choice(cfg.n_concepts, size=n_query, replace=False)
        target_proto = self.blended_prototype(concept_ids)

        distractor_pool = np.setdiff1d(np.arange(cfg.n_concepts), concept_ids)
        features = self.prototypes[rng.choice(distractor_pool, size=n)]

        start_seg, w_seg = self._plant_region(rng, n)
        features[start_seg:start_seg + w_seg] = target_proto
        gt = GroundTruthSpan(start_seg / n, (start_seg + w_seg) / n)

        query = [int(CONCEPT_BASE_ID + c) for c in sorted(concept_ids)]
        if rng.random() < cfg.dup_prob:
            slots = self._free_slots(n, start_seg, w_seg)
            if slots:
                dup_start = int(slots[rng.integers(len(slots))])
                features[dup_start:dup_start + w_seg] = target_proto
                query.append(FIRST_TOKEN_ID if start_seg < dup_start else LAST_TOKEN_ID)

        features = features + rng.normal(0.0, cfg.noise_sigma, size=features.shape)
        return Sample(
            video_id=video_id,
            features=features.astype(np.float32),
            query=query,
            query_text=" ".join(token_text(t) for t in query),
            gt=gt,
            duration_s=float(rng.uniform(*cfg.duration_range)),
        )

    @staticmethod
    def _free_slots(n: int, start_seg: int, w_seg: int) -> list[int]:
        """Start positions for a second same-width span disjoint from the first."""
        return [s for s in range(0, n - w_seg + 1)
                if s + w_seg <= start_seg or s >= start_seg + w_seg]


def generate_dataset(cfg: GenerationConfig, n_samples: int, seed: int,
                     id_prefix: str = "v") -> list[Sample]:
    """Reproducible: sample i draws from a child rng keyed by (seed, i)."""
    gen = SyntheticGenerator(cfg)
    return [gen.sample(np.random.default_rng([seed, i]), f"{id_prefix}{i:06d}")
            for i in range(n_samples)]


def prototype_scan_oracle(sample: Sample, generator: SyntheticGenerator,
                          match_tol: float = 0.35):
    """Independent localizer: mark segments within `match_tol` of the queried
    prototype blend, group runs, then pick the run the qualifier asks for."""
    concept_ids = [t - CONCEPT_BASE_ID for t in sample.query
                   if t >= CONCEPT_BASE_ID]
    target = generator.blended_prototype(concept_ids)
    dists = np.linalg.norm(sample.features - target, axis=1)
    matches = dists < match_tol
    runs = []
    start = None
    for i, m in enumerate(matches):
        if m and start is None:
            start = i
        elif not m and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(matches)))
    if not runs:
        best = int(np.argmin(dists))
        runs = [(best, best + 1)]
    if LAST_TOKEN_ID in sample.query:
        lo, hi = runs[-1]
    elif FIRST_TOKEN_ID in sample.query:
        lo, hi = runs[0]
    else:
        lo, hi = max(runs, key=lambda r: r[1] - r[0])
    n = sample.features.shape[0]
    return (lo / n, hi / n)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_dataset(samples: list[Sample], directory, split: str):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ann_path = directory / f"{split}.jsonl"
    feat_path = directory / f"{split}.features.bin"
    with open(ann_path, "w") as fh:
        for s in samples:
            fh.write(json.dumps({
                "video_id": s.video_id,
                "n_segments": int(s.features.shape[0]),
                "duration_s": s.duration_s,
                "query": list(map(int, s.query)),
                "query_text": s.query_text,
                "gt": [s.gt.start, s.gt.end],
            }) + "\n")
    with open(feat_path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IQ", FEATURE_VERSION, len(samples)))
        for s in samples:
            n, d = s.features.shape
            fh.write(struct.pack("<II", n, d))
            fh.write(s.features.astype("<f4", copy=False).tobytes())
    return ann_path, feat_path


def _parse_record(line: str, line_no: int) -> dict:
    try:
        rec = json.loads(line)
        assert isinstance(rec, dict)
        for key in ("video_id", "n_segments", "duration_s", "query", "gt"):
            assert key in rec
        assert len(rec["gt"]) == 2
    except (json.JSONDecodeError, AssertionError) as exc:
        raise DatasetError(f"malformed annotation at line {line_no}: {exc}") from None
    return rec


def load_dataset(directory, split: str) -> list[Sample]:
    directory = Path(directory)
    ann_path = directory / f"{split}.jsonl"
    feat_path = directory / f"{split}.features.bin"
    records = []
    with open(ann_path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.strip():
                records.append(_parse_record(line, line_no))
    with open(feat_path, "rb") as fh:
        magic = fh.read(len(FEATURE_MAGIC))
        if magic != FEATURE_MAGIC:
            raise DatasetError(f"bad feature file magic {magic!r}")
        version, n_samples = struct.unpack("<IQ", fh.read(12))
        if version != FEATURE_VERSION:
            raise DatasetError(f"unsupported feature schema version {version}")
        if n_samples != len(records):
            raise DatasetError(
                f"feature file holds {n_samples} samples, annotations {len(records)}")
        samples = []
        for rec in records:
            n, d = struct.unpack("<II", fh.read(8))
            if n != rec["n_segments"]:
                raise DatasetError(
                    f"segment count mismatch for {rec['video_id']}: {n} vs "
                    f"{rec['n_segments']}")
            buf = fh.read(n * d * 4)
            if len(buf) != n * d * 4:
                raise DatasetError("feature file truncated")
            feats = np.frombuffer(buf, dtype="<f4").reshape(n, d).copy()
            samples.append(Sample(
                video_id=rec["video_id"],
                features=feats,
                query=list(rec["query"]),
                query_text=rec.get("query_text", ""),
                gt=GroundTruthSpan(rec["gt"][0], rec["gt"][1]),
                duration_s=float(rec["duration_s"]),
            ))
    return samples


def save_meta(directory, cfg: GenerationConfig, seed: int, splits: dict):
    directory = Path(directory)
    meta = {
        "vocab_size": cfg.vocab_size,
        "d_video": cfg.d_video,
        "n_segments": cfg.n_segments,
        "seed": seed,
        "splits": splits,
        "generation": {
            "n_segments": cfg.n_segments, "d_video": cfg.d_video,
            "n_concepts": cfg.n_concepts, "noise_sigma": cfg.noise_sigma,
            "dup_prob": cfg.dup_prob, "width_range": list(cfg.width_range),
            "duration_range": list(cfg.duration_range),
            "max_query_concepts": cfg.max_query_concepts,
            "prototype_seed": cfg.prototype_seed,
        },
    }
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return meta


def load_meta(directory) -> dict:
    with open(Path(directory) / "meta.json") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass
class DatasetStats:
    n_videos: int
    n_annotations: int
    avg_annotations_per_video: float
    vocab_size: int
    avg_video_len_s: float
    avg_query_len: float
    avg_moment_len_s: float

    def to_dict(self) -> dict:
        return dict(vars(self))

    def table(self) -> str:
        rows = [
            ("videos", f"{self.n_videos}"),
            ("annotations", f"{self.n_annotations}"),
            ("annotations/video", f"{self.avg_annotations_per_video:.2f}"),
            ("vocabulary", f"{self.vocab_size}"),
            ("avg video length (s)", f"{self.avg_video_len_s:.2f}"),
            ("avg query length", f"{self.avg_query_len:.2f}"),
            ("avg moment length (s)", f"{self.avg_moment_len_s:.2f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def dataset_stats(annotation_path) -> DatasetStats:
    """Compute the benchmark-style statistics columns for one annotation file."""
    durations_by_video: dict[str, float] = {}
    n_annotations = 0
    vocab: set = set()
    query_lengths = []
    moment_lengths = []
    with open(annotation_path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = _parse_record(line, line_no)
            n_annotations += 1
            durations_by_video[rec["video_id"]] = float(rec["duration_s"])
            text = rec.get("query_text", "")
            tokens = text.lower().split() if text else [str(t) for t in rec["query"]]
            vocab.update(tokens)
            query_lengths.append(len(tokens))
            moment_lengths.append(
                (rec["gt"][1] - rec["gt"][0]) * float(rec["duration_s"]))
    if n_annotations == 0:
        return DatasetStats(0, 0, 0.0, 0, 0.0, 0.0, 0.0)
    n_videos = len(durations_by_video)
    return DatasetStats(
        n_videos=n_videos,
        n_annotations=n_annotations,
        avg_annotations_per_video=n_annotations / n_videos,
        vocab_size=len(vocab),
        avg_video_len_s=float(np.mean(list(durations_by_video.values()))),
        avg_query_len=float(np.mean(query_lengths)),
        avg_moment_len_s=float(np.mean(moment_lengths)),
    )
