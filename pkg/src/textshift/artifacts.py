"""Binary artifact formats: style bank, checkpoint, dataset directory.

Bank and checkpoint share one container convention: a UTF-8 key-value text
preamble terminated by an `end-header` line, then a payload of little-endian
64-bit floats in the order the preamble declares. Writing the same in-memory
object twice produces byte-identical files, and loading restores every float
bit-exactly; same-seed reruns of the pipeline are compared at the byte level.

The toy dataset persists as a directory of flat arrays plus a YAML manifest:
images as f64, labels as u8 (class ids are small; 255 is the ignore value).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .core import LabelMap, LabeledImage, SourceDataset, EvalSplit

BANK_MAGIC = "textshift-style-bank v1"
CKPT_MAGIC = "textshift-checkpoint v1"
END_HEADER = b"end-header\n"
FORMAT_VERSION = 1


@dataclass
class BankEntry:
    """Mined style for one (source image, target domain) pair."""

    domain_id: str
    image_id: str
    mu: np.ndarray
    sigma: np.ndarray
    final_alignment_loss: float
    status: str = "ok"

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype="<f8")
        self.sigma = np.ascontiguousarray(self.sigma, dtype="<f8")
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise ValueError("mu and sigma must be matching 1-D arrays")
        for name in (self.domain_id, self.image_id, self.status):
            if not name or any(c.isspace() for c in name):
                raise ValueError(f"identifier {name!r} must be non-empty, no whitespace")
        if self.status not in ("ok", "failed"):
            raise ValueError(f"unknown entry status {self.status!r}")


@dataclass
class StyleBank:
    feature_dim: int
    config_digest: str
    domains: list[str]
    entries: list[BankEntry] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        for e in self.entries:
            if e.mu.shape[0] != self.feature_dim:
                raise ValueError(
                    f"entry {e.image_id}/{e.domain_id} has dim {e.mu.shape[0]}, "
                    f"bank declares {self.feature_dim}"
                )
            if e.domain_id not in self.domains:
                raise ValueError(f"entry domain {e.domain_id!r} not in bank domain list")

    def ok_entries(self) -> list[BankEntry]:
        return [e for e in self.entries if e.status == "ok"]


def save_bank(bank: StyleBank, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        BANK_MAGIC,
        f"format_version: {bank.format_version}",
        f"feature_dim: {bank.feature_dim}",
        f"entry_count: {len(bank.entries)}",
        f"config_digest: {bank.config_digest}",
        "domains: " + ",".join(bank.domains),
    ]
    lines += [f"entry: {e.domain_id} {e.image_id} {e.status}" for e in bank.entries]
    payload = bytearray()
    for e in bank.entries:
        payload += e.mu.tobytes()
        payload += e.sigma.tobytes()
        payload += np.array([e.final_alignment_loss], dtype="<f8").tobytes()
    blob = ("\n".join(lines) + "\n").encode("utf-8") + END_HEADER + bytes(payload)
    path.write_bytes(blob)


def _split_container(raw: bytes, magic: str, path: Path) -> tuple[dict, list[str], bytes]:
    idx = raw.find(END_HEADER)
    if idx < 0:
        raise ValueError(f"{path} is not a container file (no end-header)")
    header = raw[:idx].decode("utf-8").splitlines()
    payload = raw[idx + len(END_HEADER):]
    if not header or header[0] != magic:
        raise ValueError(f"{path} has magic {header[0] if header else '<empty>'!r}, "
                         f"expected {magic!r}")
    keys, records = {}, []
    for line in header[1:]:
        k, _, v = line.partition(": ")
        if k in ("entry", "array"):
            records.append(v)
        else:
            keys[k] = v
    return keys, records, payload


def load_bank(path: str | Path) -> StyleBank:
    path = Path(path)
    keys, records, payload = _split_container(path.read_bytes(), BANK_MAGIC, path)
    dim = int(keys["feature_dim"])
    count = int(keys["entry_count"])
    if len(records) != count:
        raise ValueError(f"{path}: header lists {len(records)} entries, declares {count}")
    stride = (2 * dim + 1) * 8
    if len(payload) != count * stride:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {count * stride}")
    entries = []
    for i, rec in enumerate(records):
        parts = rec.split(" ")
        if len(parts) != 3:
            raise ValueError(f"{path}: malformed entry record {rec!r}")
        base = i * stride
        mu = np.frombuffer(payload, dtype="<f8", count=dim, offset=base).copy()
        sigma = np.frombuffer(payload, dtype="<f8", count=dim, offset=base + dim * 8).copy()
        loss = float(np.frombuffer(payload, dtype="<f8", count=1, offset=base + 2 * dim * 8)[0])
        entries.append(BankEntry(parts[0], parts[1], mu, sigma, loss, parts[2]))
    return StyleBank(
        feature_dim=dim,
        config_digest=keys["config_digest"],
        domains=keys["domains"].split(",") if keys["domains"] else [],
        entries=entries,
        format_version=int(keys["format_version"]),
    )


@dataclass
class Checkpoint:
    """Named f64 arrays plus run metadata; round-trips bit-exactly."""

    config_digest: str
    iterations: int
    rng_state: str
    rectifier_on: bool
    meta: dict[str, int]
    arrays: dict[str, np.ndarray]
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        self.arrays = {k: np.ascontiguousarray(v, dtype="<f8")
                       for k, v in self.arrays.items()}
        for k in self.arrays:
            if not k or any(c.isspace() for c in k):
                raise ValueError(f"array name {k!r} must be non-empty, no whitespace")


def save_checkpoint(ckpt: Checkpoint, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        CKPT_MAGIC,
        f"format_version: {ckpt.format_version}",
        f"config_digest: {ckpt.config_digest}",
        f"iterations: {ckpt.iterations}",
        f"rng_state: {ckpt.rng_state or '-'}",
        f"rectifier: {'on' if ckpt.rectifier_on else 'off'}",
    ]
    for k in sorted(ckpt.meta):
        v = ckpt.meta[k]
        v = int(v) if not isinstance(v, str) else v
        if isinstance(v, str) and (not v or any(c.isspace() for c in v)):
            raise ValueError(f"meta value for {k!r} must be non-empty, no whitespace")
        lines.append(f"meta-{k}: {v}")
    payload = bytearray()
    for name, arr in ckpt.arrays.items():
        dims = " ".join(str(s) for s in arr.shape) if arr.ndim else "0"
        lines.append(f"array: {name} {dims}")
        payload += arr.tobytes()
    blob = ("\n".join(lines) + "\n").encode("utf-8") + END_HEADER + bytes(payload)
    path.write_bytes(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    keys, records, payload = _split_container(path.read_bytes(), CKPT_MAGIC, path)
    arrays = {}
    offset = 0
    for rec in records:
        parts = rec.split(" ")
        name, dims = parts[0], [int(x) for x in parts[1:]]
        if dims == [0]:
            dims = []
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).copy()
        arrays[name] = arr.reshape(dims)
        offset += count * 8
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing payload bytes")
    meta = {}
    for k, v in keys.items():
        if k.startswith("meta-"):
            try:
                meta[k[len("meta-"):]] = int(v)
            except ValueError:
                meta[k[len("meta-"):]] = v
    rng = keys.get("rng_state", "-")
    return Checkpoint(
        config_digest=keys["config_digest"],
        iterations=int(keys["iterations"]),
        rng_state="" if rng == "-" else rng,
        rectifier_on=keys.get("rectifier", "off") == "on",
        meta=meta,
        arrays=arrays,
        format_version=int(keys["format_version"]),
    )


def save_dataset(out_dir: str | Path, source: SourceDataset, eval_split: EvalSplit,
                 manifest_extra: dict) -> Path:
    """Persist the toy dataset as flat arrays plus manifest.yaml.

    manifest_extra carries the toyworld parameters, class names, config
    digest and the separability report; it is stored verbatim.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def dump(prefix: str, items: list[LabeledImage]):
        images = np.stack([np.ascontiguousarray(it.image, dtype="<f8") for it in items])
        labels = np.stack([np.ascontiguousarray(it.labels.labels, dtype=np.uint8)
                           for it in items])
        (out / f"{prefix}_images.f64").write_bytes(images.tobytes())
        (out / f"{prefix}_labels.u8").write_bytes(labels.tobytes())
        (out / f"{prefix}_ids.txt").write_text("".join(it.image_id + "\n" for it in items))
        return {"count": len(items), "image_shape": list(images.shape[1:])}

    manifest = {
        "format_version": FORMAT_VERSION,
        "splits": {"train": dump("train", list(source))},
        "eval_domains": {},
    }
    for domain_id in sorted(eval_split.by_domain):
        manifest["eval_domains"][domain_id] = dump(
            f"eval_{domain_id}", eval_split.by_domain[domain_id])
    manifest.update(manifest_extra)
    (out / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True))
    return out


def _load_items(root: Path, prefix: str, count: int, shape: list[int],
                n_classes: int) -> list[LabeledImage]:
    images = np.frombuffer((root / f"{prefix}_images.f64").read_bytes(), dtype="<f8")
    images = images.reshape(count, *shape).copy()
    labels = np.frombuffer((root / f"{prefix}_labels.u8").read_bytes(), dtype=np.uint8)
    labels = labels.reshape(count, shape[0], shape[1]).copy()
    ids = (root / f"{prefix}_ids.txt").read_text().splitlines()
    if len(ids) != count:
        raise ValueError(f"{prefix}: {len(ids)} ids for {count} images")
    return [
        LabeledImage(ids[i], images[i],
                     LabelMap(labels[i].astype(np.int64), n_classes))
        for i in range(count)
    ]


def load_manifest(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / "manifest.yaml"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}; run make-toy-data first")
    manifest = yaml.safe_load(path.read_text())
    if int(manifest.get("format_version", -1)) != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format_version in {path}")
    return manifest


def load_source_dataset(dataset_dir: str | Path) -> SourceDataset:
    root = Path(dataset_dir)
    manifest = load_manifest(root)
    info = manifest["splits"]["train"]
    n_classes = int(manifest["toyworld"]["n_classes"])
    return SourceDataset(_load_items(root, "train", info["count"],
                                     info["image_shape"], n_classes))


def load_eval_split(dataset_dir: str | Path) -> EvalSplit:
    root = Path(dataset_dir)
    manifest = load_manifest(root)
    n_classes = int(manifest["toyworld"]["n_classes"])
    by_domain = {}
    for domain_id, info in manifest["eval_domains"].items():
        by_domain[domain_id] = _load_items(root, f"eval_{domain_id}", info["count"],
                                           info["image_shape"], n_classes)
    return EvalSplit(by_domain)
