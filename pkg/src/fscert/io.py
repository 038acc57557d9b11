"""Files: datasets (JSON lines), model containers, CSV and text reports.

Model container layout (little-endian)::

    b"FSC1" | u32 section count | sections...
    section: 4-byte tag | u32 header length | JSON header | float32 tensor data

The header lists tensor names and shapes in storage order plus free-form
metadata. Tags: ENCD (encoder), GSBP (denoiser), GSBM (mapper).
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import Encoder, LabeledDataset
from .gsb import Denoiser, Mapper

MAGIC = b"FSC1"
SCHEMA_VERSION = 1


class FormatError(ValueError):
    pass


# -- datasets ------------------------------------------------------------------------

def save_dataset(data: LabeledDataset, path: Path):
    path = Path(path)
    header = {"schema_version": SCHEMA_VERSION, "class_count": data.class_count, "d_in": data.d_in,
              "spec": data.spec}
    with path.open("w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for x, y in zip(data.inputs, data.labels):
            fh.write(json.dumps({"values": [float(v) for v in x], "label": int(y)}) + "\n")


def load_dataset(path: Path) -> LabeledDataset:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported schema_version {header.get('schema_version')!r}")
    recs = [json.loads(line) for line in lines[1:] if line.strip()]
    inputs = np.array([r["values"] for r in recs], dtype=np.float64).reshape(len(recs), header["d_in"])
    labels = np.array([r["label"] for r in recs], dtype=np.int64)
    return LabeledDataset(inputs, labels, int(header["class_count"]), header.get("spec", {}))


# -- model container -------------------------------------------------------------------

def _pack(tag: str, tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    names = list(tensors)
    header = {"names": names, "shapes": [list(tensors[n].shape) for n in names], "meta": meta}
    hb = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes() for n in names)
    return tag.encode("ascii") + struct.pack("<I", len(hb)) + hb + body


def encoder_section(e: Encoder) -> tuple[str, dict, dict]:
    tensors = {}
    for i, (w, b) in enumerate(zip(e.weights, e.biases)):
        tensors[f"w{i}"], tensors[f"b{i}"] = w, b
    meta = {"kind": e.kind, "d_in": e.d_in, "d_f": e.d_f, "seed": e.seed, "hidden_dims": list(e.hidden_dims),
            "gain": e.gain, "layers": len(e.weights)}
    return "ENCD", tensors, meta


def save_model(path: Path, e: Encoder, P: Denoiser | None = None, M: Mapper | None = None,
               extra_meta: dict | None = None):
    sections = [encoder_section(e)]
    if P is not None:
        sections.append(("GSBP", P.params, {**P.config, **(extra_meta or {})}))
    if M is not None:
        sections.append(("GSBM", M.params, {**M.config, **(extra_meta or {})}))
    blob = MAGIC + struct.pack("<I", len(sections)) + b"".join(_pack(*s) for s in sections)
    Path(path).write_bytes(blob)


def _read_sections(path: Path) -> dict[str, tuple[dict, dict]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a model container")
    (count,) = struct.unpack_from("<I", blob, 4)
    pos = 8
    out = {}
    for _ in range(count):
        tag = blob[pos:pos + 4].decode("ascii")
        (hlen,) = struct.unpack_from("<I", blob, pos + 4)
        header = json.loads(blob[pos + 8:pos + 8 + hlen])
        pos += 8 + hlen
        tensors = {}
        for name, shape in zip(header["names"], header["shapes"]):
            size = int(np.prod(shape)) if shape else 1
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 4 * size
        out[tag] = (tensors, header["meta"])
    if pos != len(blob):
        raise FormatError(f"{path}: trailing bytes after last section")
    return out


def load_model(path: Path) -> tuple[Encoder, Denoiser | None, Mapper | None, dict]:
    sections = _read_sections(path)
    if "ENCD" not in sections:
        raise FormatError(f"{path}: no encoder section")
    t, meta = sections["ENCD"]
    n = meta["layers"]
    e = Encoder(kind=meta["kind"], d_in=meta["d_in"], d_f=meta["d_f"], seed=meta["seed"],
                weights=tuple(t[f"w{i}"] for i in range(n)), biases=tuple(t[f"b{i}"] for i in range(n)),
                hidden_dims=tuple(meta["hidden_dims"]), gain=meta["gain"])
    P = M = None
    gsb_meta = {}
    if "GSBP" in sections:
        t, meta = sections["GSBP"]
        P = Denoiser(t, **{k: meta[k] for k in ("d_in", "hidden", "emb_dim")})
        gsb_meta = meta
    if "GSBM" in sections:
        t, meta = sections["GSBM"]
        M = Mapper(t, **{k: meta[k] for k in ("d_f", "blocks", "hidden", "film_hidden", "head_hidden")})
        gsb_meta = {**gsb_meta, **meta}
    return e, P, M, gsb_meta


# -- reports -----------------------------------------------------------------------------

def fmt_number(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(float(f"{v:.12g}"))
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt_number(row.get(c, "")) for c in columns])


def read_csv(path: Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return None if math.isnan(v) else float(f"{v:.12g}")
    return v


def write_jsonl(path: Path, records: Iterable[dict]):
    with Path(path).open("w") as fh:
        for r in records:
            fh.write(json.dumps(_plain(r), sort_keys=True) + "\n")


def write_lines(path: Path, lines: Iterable[str]):
    Path(path).write_text("".join(line + "\n" for line in lines))
