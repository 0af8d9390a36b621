"""Core data types and on-disk formats.

Binary epoch container (NDF), little-endian throughout:

    magic   4 bytes ASCII "SAF1"
    version u32 (currently 1)
    C       u32 channel count
    M       u32 samples per channel
    fs      f32 sample rate in Hz
    y       u8 class label (0 or 1)
    subject u32 byte length, then UTF-8 subject id
    payload C*M f32 values, channel-major

Raw recording container (SAFR), used by the CLI as pipeline input:

    magic   4 bytes ASCII "SAFR"
    version u32 (currently 1)
    C       u32, N u64, fs f64
    names   C entries of (u32 byte length + UTF-8)
    payload C*N f64 values, channel-major

Manifest: CSV with exact header "path,subject,class,split", UTF-8,
LF line endings, no quoting. Relative paths resolve against the
manifest's own directory.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, ParseError, ValidationError

NDF_MAGIC = b"SAF1"
NDF_VERSION = 1
SAFR_MAGIC = b"SAFR"
SAFR_VERSION = 1

SPLIT_TOKENS = ("train", "val", "test", "none")


@dataclass(frozen=True)
class Recording:
    """Continuous multichannel signal, data shaped (channels, samples)."""

    data: np.ndarray
    sample_rate_hz: float
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValidationError(f"recording data must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError("recording must have at least one channel and one sample")
        if self.sample_rate_hz <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("recording contains non-finite values")
        names = self.channel_names or tuple(f"ch{i}" for i in range(data.shape[0]))
        if len(names) != data.shape[0]:
            raise ValidationError(
                f"{len(names)} channel names for {data.shape[0]} channels"
            )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_names", tuple(names))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.data.shape[1] / self.sample_rate_hz


@dataclass(frozen=True)
class Epoch:
    """One fixed-length training sample: x is (channels, samples) float32."""

    x: np.ndarray
    y: int
    s: str
    sample_rate_hz: float
    subject_index: int = 0

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float32)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValidationError(f"epoch data must be non-empty 2-D, got shape {x.shape}")
        if self.y not in (0, 1):
            raise ValidationError(f"class label must be 0 or 1, got {self.y}")
        if self.sample_rate_hz <= 0:
            raise ValidationError("sample rate must be positive")
        if not np.all(np.isfinite(x)):
            raise ValidationError("epoch contains non-finite values")
        object.__setattr__(self, "x", x)

    @property
    def channels(self) -> int:
        return self.x.shape[0]

    @property
    def samples(self) -> int:
        return self.x.shape[1]


@dataclass
class EpochSet:
    """A collection of epochs with consistent shape and a per-epoch split tag.

    Construction reindexes every epoch's subject_index against the sorted
    set of subject ids, so the index is a stable bijection onto [0, L).
    """

    epochs: list[Epoch]
    split: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.split:
            self.split = ["none"] * len(self.epochs)
        if len(self.split) != len(self.epochs):
            raise ValidationError("split list length must match epoch count")
        for tag in self.split:
            if tag not in SPLIT_TOKENS:
                raise ValidationError(f"unknown split tag {tag!r}")
        if self.epochs:
            c, m = self.epochs[0].channels, self.epochs[0].samples
            fs = self.epochs[0].sample_rate_hz
            for ep in self.epochs:
                if ep.channels != c or ep.samples != m or ep.sample_rate_hz != fs:
                    raise ValidationError(
                        "all epochs in a set must share channel count, length and rate"
                    )
        index = {s: i for i, s in enumerate(sorted({ep.s for ep in self.epochs}))}
        self.epochs = [
            ep if ep.subject_index == index[ep.s] else replace(ep, subject_index=index[ep.s])
            for ep in self.epochs
        ]

    @property
    def subjects(self) -> list[str]:
        return sorted({ep.s for ep in self.epochs})

    @property
    def per_subject_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {s: 0 for s in self.subjects}
        for ep in self.epochs:
            counts[ep.s] += 1
        return counts

    def subset(self, tag: str) -> list[Epoch]:
        return [ep for ep, t in zip(self.epochs, self.split) if t == tag]

    def __len__(self) -> int:
        return len(self.epochs)


@dataclass
class Manifest:
    """Rows of (path, subject, class, split); paths relative to base_dir."""

    rows: list[tuple[str, str, int, str]]
    base_dir: str = "."
    format_version: int = 1


def write_ndf(epoch: Epoch, path: str) -> None:
    """Serialize one epoch to the binary NDF layout (see module docstring)."""
    x = epoch.x
    if not np.all(np.isfinite(x)):
        raise ValidationError("refusing to write non-finite epoch data")
    sbytes = epoch.s.encode("utf-8")
    header = struct.pack(
        "<4sIIIfB I",
        NDF_MAGIC,
        NDF_VERSION,
        epoch.channels,
        epoch.samples,
        float(epoch.sample_rate_hz),
        epoch.y,
        len(sbytes),
    )
    payload = np.ascontiguousarray(x, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(sbytes)
        fh.write(payload)


def read_ndf(path: str) -> Epoch:
    """Read one epoch written by write_ndf; rejects bad magic and truncation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    head_fmt = "<4sIIIfB I"
    head_size = struct.calcsize(head_fmt)
    if len(blob) < head_size:
        raise FormatError(f"{path}: file too short for NDF header")
    magic, version, c, m, fs, y, slen = struct.unpack_from(head_fmt, blob)
    if magic != NDF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != NDF_VERSION:
        raise FormatError(f"{path}: unsupported NDF version {version}")
    offset = head_size
    if len(blob) < offset + slen:
        raise FormatError(f"{path}: truncated subject id")
    subject = blob[offset : offset + slen].decode("utf-8")
    offset += slen
    expected = c * m * 4
    if len(blob) - offset != expected:
        raise FormatError(
            f"{path}: payload is {len(blob) - offset} bytes, expected {expected}"
        )
    x = np.frombuffer(blob, dtype="<f4", count=c * m, offset=offset).reshape(c, m)
    return Epoch(x=x.copy(), y=int(y), s=subject, sample_rate_hz=float(fs))


def write_recording(rec: Recording, path: str) -> None:
    """Serialize a continuous recording to the SAFR container."""
    with open(path, "wb") as fh:
        fh.write(SAFR_MAGIC)
        fh.write(struct.pack("<IIQd", SAFR_VERSION, rec.channels, rec.samples,
                             float(rec.sample_rate_hz)))
        for name in rec.channel_names:
            nbytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nbytes)))
            fh.write(nbytes)
        fh.write(np.ascontiguousarray(rec.data, dtype="<f8").tobytes())


def read_recording(path: str) -> Recording:
    """Read a SAFR recording container."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != SAFR_MAGIC:
        raise FormatError(f"{path}: not a SAFR recording")
    version, c, n, fs = struct.unpack_from("<IIQd", blob, 4)
    if version != SAFR_VERSION:
        raise FormatError(f"{path}: unsupported SAFR version {version}")
    offset = 4 + struct.calcsize("<IIQd")
    names = []
    for _ in range(c):
        if len(blob) < offset + 4:
            raise FormatError(f"{path}: truncated channel names")
        (nlen,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        names.append(blob[offset : offset + nlen].decode("utf-8"))
        offset += nlen
    expected = c * n * 8
    if len(blob) - offset != expected:
        raise FormatError(f"{path}: truncated or oversized payload")
    data = np.frombuffer(blob, dtype="<f8", count=c * n, offset=offset).reshape(c, n)
    return Recording(data=data.copy(), sample_rate_hz=fs, channel_names=tuple(names))


def write_manifest(manifest: Manifest, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("path,subject,class,split\n")
        for row_path, subject, cls, split in manifest.rows:
            fh.write(f"{row_path},{subject},{cls},{split}\n")


def load_manifest(path: str) -> tuple[Manifest, EpochSet]:
    """Load a manifest CSV and every epoch it references, in row order."""
    base_dir = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty manifest") from None
        if header != ["path", "subject", "class", "split"]:
            raise ParseError(f"{path}: bad header {header!r}")
        rows: list[tuple[str, str, int, str]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            p, subject, cls_s, split = row
            if cls_s not in ("0", "1"):
                raise ParseError(f"{path}:{lineno}: class must be 0 or 1, got {cls_s!r}")
            if split not in SPLIT_TOKENS:
                raise ParseError(f"{path}:{lineno}: unknown split {split!r}")
            rows.append((p, subject, int(cls_s), split))

    manifest = Manifest(rows=rows, base_dir=base_dir)
    epochs: list[Epoch] = []
    splits: list[str] = []
    for p, subject, cls, split in rows:
        full = p if os.path.isabs(p) else os.path.join(base_dir, p)
        ep = read_ndf(full)
        if ep.y != cls:
            raise ValidationError(f"{full}: class {ep.y} disagrees with manifest {cls}")
        if ep.s != subject:
            raise ValidationError(f"{full}: subject {ep.s!r} disagrees with manifest {subject!r}")
        epochs.append(ep)
        splits.append(split)
    return manifest, EpochSet(epochs=epochs, split=splits)


def split_dataset(epoch_set: EpochSet, ratios: tuple[float, float, float],
                  seed: int) -> EpochSet:
    """Assign train/val/test tags, stratified by (subject, class).

    Within each stratum the epochs are shuffled with a generator seeded from
    `seed` and assigned by cumulative ratio with floor rounding; remainder
    epochs go to train. The assignment is deterministic per seed.
    """
    r_train, r_val, r_test = ratios
    if min(ratios) <= 0:
        raise ValidationError("split ratios must be positive")
    if abs(r_train + r_val + r_test - 1.0) > 1e-9:
        raise ValidationError(f"split ratios must sum to 1, got {sum(ratios)}")

    rng = np.random.default_rng(seed)
    strata: dict[tuple[str, int], list[int]] = {}
    for i, ep in enumerate(epoch_set.epochs):
        strata.setdefault((ep.s, ep.y), []).append(i)

    split = ["train"] * len(epoch_set.epochs)
    for key in sorted(strata):
        idx = strata[key]
        order = rng.permutation(len(idx))
        n = len(idx)
        # cumulative boundaries keep every split within one epoch of its ratio
        edge_train = int(np.floor(n * r_train))
        edge_val = int(np.floor(n * (r_train + r_val)))
        edge_test = int(np.floor(n * (r_train + r_val + r_test)))
        for pos, j in enumerate(order):
            if pos < edge_train:
                tag = "train"
            elif pos < edge_val:
                tag = "val"
            elif pos < edge_test:
                tag = "test"
            else:
                tag = "train"  # float shortfall lands in train
            split[idx[j]] = tag
    return EpochSet(epochs=list(epoch_set.epochs), split=split)
