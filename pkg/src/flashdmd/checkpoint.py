"""Binary checkpoints.

Layout::

    b"DMDFLASH1"                 magic; the trailing digit is the format version
    uint64 little-endian         header length in bytes
    header                       UTF-8 JSON, sorted keys, compact separators
    payload                      little-endian float64 arrays, in header order

The header carries the config echo, counters, RNG state, optimizer scalars and
an array manifest (name, shape, element offset). Any language can read it
without a framework, and save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig, from_dict
from .models import DenoiserNet, DiscriminatorNet
from .numerics import AdamState, Rng

MAGIC_PREFIX = b"DMDFLASH"
FORMAT_VERSION = 1
MAGIC = MAGIC_PREFIX + str(FORMAT_VERSION).encode()
OPTIMIZERS = ("gen", "psi", "disc")


class CheckpointVersionError(ValueError):
    """The file is a checkpoint, but of a format version this build cannot read."""


class CheckpointFormatError(ValueError):
    """The file is not a readable checkpoint."""


def _net_groups(state) -> list[tuple[str, list[str], list[np.ndarray]]]:
    groups = [
        ("gen", state.gen.names, [p.data for p in state.gen.params]),
        ("psi", state.psi.names, [p.data for p in state.psi.params]),
    ]
    disc = state.disc.arrays()
    names = state.disc.trunk_names + state.disc.head_names
    groups.append(("disc", names, [disc[k] for k in names]))
    if state.ref is not None:
        groups.append(("ref", state.ref.names, [p.data for p in state.ref.params]))
    return groups


def _optimizer(state, which: str) -> tuple[AdamState, list[str]]:
    if which == "gen":
        return state.opt_gen, state.gen.names
    if which == "psi":
        return state.opt_psi, state.psi.names
    names = ([] if state.disc.arch.freeze_trunk else state.disc.trunk_names) + state.disc.head_names
    return state.opt_disc, names


def encode(state) -> bytes:
    """Serialise a ``TrainState`` to checkpoint bytes."""
    manifest, chunks, offset = [], [], 0

    def add(name: str, arr: np.ndarray):
        nonlocal offset
        a = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size

    for group, names, arrays in _net_groups(state):
        for n, a in zip(names, arrays):
            add(f"{group}/{n}", a)
    optim = {}
    for which in OPTIMIZERS:
        opt, names = _optimizer(state, which)
        for n, m, v in zip(names, opt.m, opt.v):
            add(f"opt_{which}/m/{n}", m)
            add(f"opt_{which}/v/{n}", v)
        optim[which] = {"step_count": opt.step_count, "lr": opt.lr, "beta1": opt.beta1,
                        "beta2": opt.beta2, "eps": opt.eps}
    header = {
        "format_version": FORMAT_VERSION,
        "config": state.cfg.echo(),
        "iteration": state.iteration,
        "phase2_updates": state.phase2_updates,
        "stage": state.stage,
        "counts": dict(vars(state.counts)),
        "last_losses": dict(state.last_losses),
        "rng": state.rng.get_state(),
        "optim": optim,
        "arrays": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def read_header(blob: bytes) -> tuple[dict, memoryview]:
    if not blob.startswith(MAGIC_PREFIX):
        raise CheckpointFormatError("missing DMDFLASH magic")
    if not blob.startswith(MAGIC):
        found = blob[len(MAGIC_PREFIX):len(MAGIC)].decode("ascii", "replace")
        raise CheckpointVersionError(f"checkpoint format version {found!r}, this build reads {FORMAT_VERSION}")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointFormatError("truncated header length")
    (n,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(blob[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"header format_version {header.get('format_version')!r}, this build reads {FORMAT_VERSION}")
    return header, memoryview(blob)[pos + n:]


def decode(blob: bytes):
    """Rebuild a ``TrainState`` from checkpoint bytes."""
    from . import trainer  # local import: trainer depends on this module's callers

    header, payload = read_header(blob)
    flat = np.frombuffer(payload, dtype="<f8")
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > flat.size:
            raise CheckpointFormatError(f"payload too short for {entry['name']}")
        arrays[entry["name"]] = flat[start:start + size].reshape(entry["shape"]).astype(np.float64)

    cfg = from_dict(header["config"], require=True)
    teacher = trainer.build_teacher(cfg)

    def group(prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}

    arch = trainer.net_arch(cfg, teacher)
    gen = DenoiserNet(arch, group("gen"))
    psi = DenoiserNet(arch, group("psi"))
    d = group("disc")
    disc = DiscriminatorNet(trainer.disc_arch(cfg, teacher),
                            {k: v for k, v in d.items() if k.startswith("t")},
                            {k: v for k, v in d.items() if k.startswith("h")})
    ref_arrays = group("ref")
    ref = DenoiserNet(arch, ref_arrays, trainable=False) if ref_arrays else None

    state = trainer.TrainState(
        cfg=cfg, sched=trainer.build_schedule(cfg), grid=trainer.build_grid(cfg), teacher=teacher,
        gen=gen, psi=psi, disc=disc,
        opt_gen=AdamState.for_params(gen.params), opt_psi=AdamState.for_params(psi.params),
        opt_disc=AdamState.for_params(disc.params), rng=Rng.from_state(header["rng"]),
        iteration=header["iteration"], phase2_updates=header["phase2_updates"], stage=header["stage"],
        ref=ref, counts=trainer.Counts(**header["counts"]), last_losses=dict(header["last_losses"]),
    )
    for which in OPTIMIZERS:
        opt, names = _optimizer(state, which)
        scal = header["optim"][which]
        opt.step_count = scal["step_count"]
        opt.lr, opt.beta1, opt.beta2, opt.eps = scal["lr"], scal["beta1"], scal["beta2"], scal["eps"]
        opt.m = [arrays[f"opt_{which}/m/{n}"] for n in names]
        opt.v = [arrays[f"opt_{which}/v/{n}"] for n in names]
    if state.stage == "stage2" and state.ref is None:
        raise CheckpointFormatError("stage2 checkpoint without a frozen reference")
    return state


def save_checkpoint(state, path: str | Path) -> Path:
    """Write atomically (temp file + rename) so a crash never leaves a torn checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode(state))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path):
    return decode(Path(path).read_bytes())


def checkpoint_config(path: str | Path) -> RunConfig:
    header, _ = read_header(Path(path).read_bytes())
    return from_dict(header["config"], require=True)
