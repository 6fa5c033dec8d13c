"""Utterance container, feature files and corpus manifests.

Feature file: ``b"LAEF" | u32 T | u32 F | T*F little-endian f32`` (row-major).
Manifest: one tab-separated record per line,
``utt_id  partition  feature_path  target_ids  tags`` with space-separated
ids and tags; feature paths are relative to the manifest directory.
Token spans live beside it in ``spans.tsv`` (``utt_id  start:end ...``).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEAT_MAGIC = b"LAEF"

PARTITIONS = ("train-mono-A", "train-mono-B", "train-CS", "train-simu-CS",
              "eval-mono-A", "eval-mono-B", "eval-CS")


class DataError(ValueError):
    pass


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray
    targets: tuple
    tags: tuple
    spans: list = field(default_factory=list)  # (start, end) frame range per token
    partition: str = ""

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def kind(self) -> str:
        """``mono-A``, ``mono-B`` or ``code-switched`` from the token tags."""
        langs = set(self.tags)
        if langs == {"A"}:
            return "mono-A"
        if langs == {"B"}:
            return "mono-B"
        return "code-switched"


def write_features(path, feats: np.ndarray) -> None:
    arr = np.ascontiguousarray(feats, dtype="<f4")
    if arr.ndim != 2:
        raise DataError("features must be a T x F matrix")
    Path(path).write_bytes(FEAT_MAGIC + struct.pack("<II", *arr.shape) + arr.tobytes())


def read_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != FEAT_MAGIC:
        raise DataError(f"{path}: not a feature file")
    t, f = struct.unpack_from("<II", buf, 4)
    if len(buf) != 12 + 4 * t * f:
        raise DataError(f"{path}: expected {t}x{f} floats, file size disagrees")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(t, f).astype(np.float32)


def manifest_line(utt: Utterance, feat_path: str) -> str:
    return "\t".join([utt.utt_id, utt.partition, feat_path,
                      " ".join(map(str, utt.targets)), " ".join(utt.tags)]) + "\n"


def save_corpus(utts: list[Utterance], out_dir) -> Path:
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    lines, spans = [], []
    for u in utts:
        rel = f"feats/{u.utt_id}.laef"
        write_features(out / rel, u.features)
        lines.append(manifest_line(u, rel))
        spans.append(u.utt_id + "\t" + " ".join(f"{s}:{e}" for s, e in u.spans) + "\n")
    manifest = out / "manifest.tsv"
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)
    with open(out / "spans.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(spans)
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    recs = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{path}:{n + 1}: expected 5 tab-separated fields")
        utt_id, part, feat, ids, tags = parts
        recs.append({"utt_id": utt_id, "partition": part, "path": feat,
                     "targets": tuple(int(x) for x in ids.split()), "tags": tuple(tags.split())})
    return recs


def load_corpus(data_dir, partitions=None) -> list[Utterance]:
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    spans = {}
    span_file = data_dir / "spans.tsv"
    if span_file.exists():
        for line in span_file.read_text(encoding="utf-8").splitlines():
            utt, _, rest = line.partition("\t")
            spans[utt] = [tuple(int(v) for v in s.split(":")) for s in rest.split()]
    wanted = set(partitions) if partitions else None
    out = []
    for rec in read_manifest(manifest):
        if wanted is not None and rec["partition"] not in wanted:
            continue
        feats = read_features(data_dir / rec["path"])
        out.append(Utterance(rec["utt_id"], feats, rec["targets"], rec["tags"],
                             spans.get(rec["utt_id"], []), rec["partition"]))
    return out
