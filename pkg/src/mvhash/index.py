"""Multi-view index: offline build over all views and the on-disk bundle format.

A bundle is a directory holding per-view artifacts (hash model, database
codes, anchors, independence matrix) plus the split and a manifest.json that
records file names, sha256 content hashes, and the build parameters. Builds
are deterministic: the same data and seed reproduce byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .anchors import build_anchors, load_anchor_model, save_anchor_model
from .dataset import DatasetSplit, MultiViewDataset
from .hashing import encode, load_codes, load_model, save_codes, save_model, train
from .qrank import HashTable, independence_matrix, load_independence, save_independence

MAGIC_SPLIT = b"MVHS"
MANIFEST_NAME = "manifest.json"
BUNDLE_FORMAT = "mvhash-bundle"
BUNDLE_VERSION = 1


@dataclass
class MultiViewIndex:
    """Built search state for every view plus the split it was built from."""

    tables: list[HashTable]
    split: DatasetSplit
    bits: int
    family: str
    seed: int
    params: dict

    @property
    def n_views(self) -> int:
        return len(self.tables)


def _view_seed(seed: int, view: int, salt: int) -> int:
    # distinct deterministic streams per (view, stage)
    return int(seed) + 1_000_003 * int(view) + 101 * int(salt)


def build_index(
    dataset: MultiViewDataset,
    split: DatasetSplit,
    bits: int = 48,
    family: str = "lsh",
    anchors: int = 300,
    anchor_method: str = "random",
    s_nn: int = 5,
    lam: float = 1.0,
    itq_iters: int = 50,
    seed: int = 7,
    params: dict | None = None,
) -> MultiViewIndex:
    """Offline stage: per view, train hashes, encode the database, pick anchors,
    and compute the bit-independence matrix on the training split."""
    tables = []
    for m, view in enumerate(dataset.views):
        model = train(family, view.data[split.train], bits, seed=_view_seed(seed, m, 1),
                      itq_iters=itq_iters)
        db_codes = encode(model, view.data[split.database])
        anchor_model = build_anchors(
            view.data[split.database], anchors, method=anchor_method, s_nn=s_nn,
            seed=_view_seed(seed, m, 2), hash_model=model,
        )
        train_codes = encode(model, view.data[split.train])
        indep = independence_matrix(train_codes, lam=lam)
        tables.append(HashTable(
            name=view.name,
            hash_model=model,
            codes=db_codes,
            db_ids=split.database.astype(np.int64),
            anchor_model=anchor_model,
            independence=indep,
        ))
    return MultiViewIndex(tables=tables, split=split, bits=bits, family=family,
                          seed=seed, params=params or {})


def save_split(path: Union[str, Path], split: DatasetSplit) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC_SPLIT)
        fh.write(struct.pack("<IIII", 1, len(split.train), len(split.query), len(split.database)))
        for arr in (split.train, split.query, split.database):
            fh.write(np.ascontiguousarray(arr, dtype="<u4").tobytes())


def load_split(path: Union[str, Path]) -> DatasetSplit:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC_SPLIT:
        raise ValueError(f"{path}: bad split magic")
    ver, nt, nq, nd = struct.unpack("<IIII", raw[4:20])
    if ver != 1:
        raise ValueError(f"{path}: unsupported split version {ver}")
    off = 20
    out = []
    for count in (nt, nq, nd):
        out.append(np.frombuffer(raw, dtype="<u4", count=count, offset=off).astype(np.int64))
        off += 4 * count
    return DatasetSplit(train=out[0], query=out[1], database=out[2])


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def save_bundle(index: MultiViewIndex, bundle_dir: Union[str, Path]) -> Path:
    """Write all artifacts plus manifest.json; returns the manifest path."""
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}

    split_name = "split.bin"
    save_split(bundle_dir / split_name, index.split)
    files[split_name] = _sha256(bundle_dir / split_name)

    views = []
    for m, table in enumerate(index.tables):
        names = {
            "model": f"view{m}.model.bin",
            "codes": f"view{m}.codes.bin",
            "anchors": f"view{m}.anchors.bin",
            "independence": f"view{m}.indep.bin",
        }
        save_model(bundle_dir / names["model"], table.hash_model)
        save_codes(bundle_dir / names["codes"], table.codes)
        save_anchor_model(bundle_dir / names["anchors"], table.anchor_model)
        save_independence(bundle_dir / names["independence"], table.independence)
        for f in names.values():
            files[f] = _sha256(bundle_dir / f)
        views.append({"name": table.name, "files": names})

    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "bits": index.bits,
        "family": index.family,
        "seed": index.seed,
        "n_views": index.n_views,
        "views": views,
        "split": split_name,
        "files": files,
        "params": index.params,
    }
    path = bundle_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_bundle(bundle_dir: Union[str, Path], verify: bool = True) -> MultiViewIndex:
    """Load a bundle directory; verifies content hashes unless verify=False."""
    bundle_dir = Path(bundle_dir)
    manifest_path = bundle_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ValueError(f"{bundle_dir}: no {MANIFEST_NAME}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"{bundle_dir}: not a {BUNDLE_FORMAT} bundle")
    if manifest.get("version") != BUNDLE_VERSION:
        raise ValueError(f"{bundle_dir}: unsupported bundle version {manifest.get('version')}")
    if verify:
        for name, digest in manifest["files"].items():
            actual = _sha256(bundle_dir / name)
            if actual != digest:
                raise ValueError(f"{bundle_dir}/{name}: content hash mismatch")
    split = load_split(bundle_dir / manifest["split"])
    tables = []
    for view in manifest["views"]:
        names = view["files"]
        model = load_model(bundle_dir / names["model"])
        codes = load_codes(bundle_dir / names["codes"])
        anchor_model = load_anchor_model(bundle_dir / names["anchors"])
        indep = load_independence(bundle_dir / names["independence"])
        tables.append(HashTable(
            name=view["name"],
            hash_model=model,
            codes=codes,
            db_ids=split.database.astype(np.int64),
            anchor_model=anchor_model,
            independence=indep,
        ))
    return MultiViewIndex(
        tables=tables,
        split=split,
        bits=manifest["bits"],
        family=manifest["family"],
        seed=manifest["seed"],
        params=manifest.get("params", {}),
    )
