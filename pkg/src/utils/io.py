import csv
import json
import struct
from pathlib import Path

import numpy as np

# SBGC container: magic, format version (u32 LE), header length (u32 LE),
# UTF-8 JSON header, raw little-endian payload.
MAGIC = b"SBGC"
FORMAT_VERSION = 1

DTYPE_CODES = {"u8": np.dtype("u1"), "f64": np.dtype("<f8")}
LABEL_DTYPE = np.dtype("<i8")


def write_container(path, header: dict, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def read_container(path):
    """
    Read an SBGC container.

    Returns:
        (header: dict, payload: bytes)
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path} is not an SBGC file (magic {blob[:4]!r})")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    return header, blob[12 + header_len:]


def save_dataset(dataset, path):
    """
    Write a Dataset to the SBGC container.

    header example:
        {
            "kind": "dataset",
            "shape": [N, D] or [N, H, W],
            "dtype": "u8" | "f64",
            "num_classes": K,
            "levels": 256 | null,
            "domain": [lo, hi],
            "quantized": true
        }
    payload: samples (row-major) followed by N int64 labels.
    """
    dtype_code = "u8" if dataset.quantized else "f64"
    samples = np.ascontiguousarray(dataset.samples, dtype=DTYPE_CODES[dtype_code])
    header = {
        "kind": "dataset",
        "shape": list(samples.shape),
        "dtype": dtype_code,
        "num_classes": dataset.num_classes,
        "levels": dataset.levels,
        "domain": list(dataset.domain),
        "quantized": dataset.quantized,
    }
    labels = np.ascontiguousarray(dataset.labels, dtype=LABEL_DTYPE)
    write_container(path, header, samples.tobytes() + labels.tobytes())


def load_dataset(path):
    # imported here so the container layer stays free of experiment imports
    from src.experiments.datasets import Dataset

    header, payload = read_container(path)
    if header.get("kind") != "dataset":
        raise ValueError(f"{path} is not a dataset container (kind={header.get('kind')!r})")
    dtype = DTYPE_CODES[header["dtype"]]
    shape = tuple(header["shape"])
    n_values = int(np.prod(shape))
    n_sample_bytes = n_values * dtype.itemsize
    samples = np.frombuffer(payload[:n_sample_bytes], dtype=dtype).reshape(shape)
    labels = np.frombuffer(payload[n_sample_bytes:], dtype=LABEL_DTYPE)
    if labels.size != shape[0]:
        raise ValueError(f"{path}: {labels.size} labels for {shape[0]} samples")

    print(f"Loaded dataset from {path} ({shape[0]} samples, shape {shape[1:]}, K={header['num_classes']}).")

    return Dataset(
        samples=samples.astype(np.int64) if header["quantized"] else samples.astype(np.float64),
        labels=labels.astype(np.int64),
        num_classes=header["num_classes"],
        quantized=header["quantized"],
        levels=header["levels"],
        domain=tuple(header["domain"]),
    )


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_ndjson(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_ndjson(path):
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_csv(path, rows, fieldnames=None):
    """Write dict rows; with no rows a header-only file is written from fieldnames."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
