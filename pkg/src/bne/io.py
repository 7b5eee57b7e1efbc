"""Persistence: posterior-draw CSVs with JSON sidecars, frozen base models."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from bne import gp
from bne.data import BaseEnsemble, KernelRidge
from bne.inference import PosteriorDraws
from bne.model import Hyperparams

FIELDS = (("omega", "omega"), ("delta", "delta"), ("F_latent", "F"), ("f_latent", "f"))


class FormatError(ValueError):
    pass


def to_jsonable(obj):
    """Plain Python containers of builtin scalars, for deterministic JSON output."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def save_draws(draws: PosteriorDraws, path, meta: dict | None = None) -> None:
    """One row per draw: chain, step, omega_*, delta_*, F_*, f_*; metadata goes to the JSON sidecar."""
    blocks = [draws.flat(name) for name, _ in FIELDS]
    header = ["chain", "step"]
    for (name, label), b in zip(FIELDS, blocks):
        header += [f"{label}_{j + 1}" for j in range(b.shape[1])]
    chain, step = draws.chain_index, draws.step_index
    values = np.concatenate(blocks, axis=1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(draws)):
            w.writerow([int(chain[i]), int(step[i])] + [format(float(v), ".17g") for v in values[i]])
    info = {
        "kind": draws.kind,
        "hyper": asdict(draws.hyper) if draws.hyper is not None else None,
        "shape": {name: int(b.shape[1]) for (name, _), b in zip(FIELDS, blocks)},
        "n_chains": draws.n_chains,
        "n_samples": draws.n_samples,
        "sampler": draws.meta,
    }
    if meta:
        info.update(meta)
    write_json(info, sidecar(path))


def load_draws(path) -> tuple[PosteriorDraws, dict]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such draws file: {path}")
    info = read_json(sidecar(path)) if sidecar(path).exists() else None
    if info is None:
        raise FormatError(f"missing metadata sidecar {sidecar(path)}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [r for r in reader]
    if header is None or header[:2] != ["chain", "step"]:
        raise FormatError(f"{path} is not a draws file")
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    C, S = info["n_chains"], info["n_samples"]
    if data.shape[0] != C * S:
        raise FormatError(f"{path} has {data.shape[0]} rows, sidecar promises {C * S}")
    out = {}
    for name, label in FIELDS:
        cols = [j for j, h in enumerate(header) if h.rsplit("_", 1)[0] == label]
        if len(cols) != info["shape"][name]:
            raise FormatError(f"{path}: expected {info['shape'][name]} {label}_* columns, found {len(cols)}")
        out[name] = data[:, cols].reshape(C, S, len(cols))
    hyper = Hyperparams(**info["hyper"]) if info.get("hyper") else None
    return PosteriorDraws(kind=info["kind"], hyper=hyper, meta=info.get("sampler", {}), **out), info


def base_models_to_dict(models: BaseEnsemble) -> dict:
    return {
        "models": [
            {"family": m.kernel.family, "length_scale": m.kernel.length_scale, "period": m.kernel.period,
             "amplitude": m.kernel.amplitude, "ridge": m.ridge, "X": m.X.tolist(), "coef": m.coef.tolist()}
            for m in models.models
        ],
        "train_index": models.train_index.tolist(),
        "ensemble_index": models.ensemble_index.tolist(),
    }


def base_models_from_dict(d: dict) -> BaseEnsemble:
    models = []
    for m in d["models"]:
        k = gp.KernelSpec(m["family"], m["length_scale"], period=m["period"], amplitude=m["amplitude"])
        models.append(KernelRidge(k, m["ridge"], np.asarray(m["X"], dtype=float), np.asarray(m["coef"], dtype=float)))
    return BaseEnsemble(tuple(models), (), np.asarray(d["train_index"], dtype=int),
                        np.asarray(d["ensemble_index"], dtype=int))
