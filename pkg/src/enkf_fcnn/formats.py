"""Readers and writers for the truth, dataset, run, metrics and manifest artifacts.

The layouts are documented in ``docs/formats.md``.
"""

import csv
import getpass
import io
import platform
import time
from pathlib import Path

import numpy as np

from . import __version__, artifacts
from .errors import ContractViolation, CorruptFileError, ProvenanceError, VersionMismatchError
from .pipeline import Dataset, TrajectoryRecords, TruthTrajectory

TRUTH_FORMAT = "enkf-fcnn-truth"
DATASET_FORMAT = "enkf-fcnn-dataset"
MANIFEST_FORMAT = "enkf-fcnn-manifest"
VERSION = 1


def _check_header(doc, fmt, source):
    if not isinstance(doc, dict) or doc.get("format") != fmt:
        raise CorruptFileError(f"{source}: not an {fmt} document")
    if doc.get("version") != VERSION:
        raise VersionMismatchError(f"{source}: version {doc.get('version')!r}, expected {VERSION}")


def _verify_content(doc, source):
    try:
        payload = doc["trajectories"]
        stored = doc["content_sha256"]
    except KeyError as exc:
        raise CorruptFileError(f"{source}: missing '{exc.args[0]}'") from None
    actual = artifacts.content_sha256(payload)
    if actual != stored:
        raise ProvenanceError(f"{source}: content hash mismatch (stored {stored[:12]}, actual {actual[:12]})")
    return actual


# -- truth -----------------------------------------------------------------

def truth_document(config, truths):
    payload = [
        {"index": t.index, "initial_condition": t.initial_condition, "states": t.states}
        for t in truths
    ]
    return {
        "format": TRUTH_FORMAT,
        "version": VERSION,
        "truth_key": config.truth_key(),
        "seed": config.seed,
        "model": config.document["model"],
        "windows": config.windows,
        "content_sha256": artifacts.content_sha256(payload),
        "trajectories": payload,
    }


def save_truths(path, config, truths):
    return artifacts.write_json(path, truth_document(config, truths))


def load_truths(path, config=None):
    """Load truth trajectories; verifies the content hash and, if given, the config."""
    doc = artifacts.read_json(path)
    _check_header(doc, TRUTH_FORMAT, path)
    content = _verify_content(doc, path)
    if config is not None and doc.get("truth_key") != config.truth_key():
        raise ProvenanceError(f"{path}: truth was generated from a different configuration or seed")
    truths = [
        TruthTrajectory(int(t["index"]), np.asarray(t["initial_condition"], dtype=np.float64),
                        np.asarray(t["states"], dtype=np.float64).reshape(len(t["states"]), -1))
        for t in doc["trajectories"]
    ]
    return truths, content


# -- dataset ---------------------------------------------------------------

def dataset_document(config, dataset, truth_sha):
    payload = [
        {
            "index": r.index,
            "obs_means": r.obs_means,
            "small_means": r.small_means,
            "large_means": r.large_means,
            "small_ensembles": r.small_ensembles,
            "targets": r.targets,
        }
        for r in dataset.trajectories
    ]
    return {
        "format": DATASET_FORMAT,
        "version": VERSION,
        "config": config.document,
        "config_sha256": artifacts.content_sha256(config.document),
        "seed": config.seed,
        "truth_key": config.truth_key(),
        "truth_sha256": truth_sha,
        "ensemble": {"large": config.large, "small": config.small},
        "input_layout": config.input_layout(),
        "split": {"train": dataset.train_ids, "validation": dataset.val_ids, "test": dataset.test_ids},
        "excluded": dataset.excluded,
        "content_sha256": artifacts.content_sha256(payload),
        "trajectories": payload,
    }


def save_dataset(path, config, dataset, truth_sha):
    return artifacts.write_json(path, dataset_document(config, dataset, truth_sha))


def load_dataset(path):
    doc = artifacts.read_json(path)
    _check_header(doc, DATASET_FORMAT, path)
    content = _verify_content(doc, path)
    records = []
    for t in doc["trajectories"]:
        arr = {k: np.asarray(t[k], dtype=np.float64) for k in
               ("obs_means", "small_means", "large_means", "small_ensembles", "targets")}
        if arr["targets"].size == 0:
            arr["targets"] = arr["targets"].reshape(0, arr["small_means"].shape[1])
        records.append(TrajectoryRecords(int(t["index"]), **arr))
    split = doc["split"]
    ds = Dataset(records, list(split["train"]), list(split["validation"]), list(split["test"]),
                 excluded=list(doc.get("excluded", [])))
    ds.meta = {k: v for k, v in doc.items() if k != "trajectories"}
    ds.meta["content_sha256"] = content
    return ds


# -- run time series -------------------------------------------------------

def run_columns(d, m, coupled):
    cols = ["trajectory", "step", "time"]
    cols += [f"truth_{i}" for i in range(d)]
    cols += [f"obs_mean_{i}" for i in range(m)]
    cols += [f"analysis_mean_{i}" for i in range(d)]
    if coupled:
        cols += [f"corrected_mean_{i}" for i in range(d)]
    return cols


def run_rows(config, truth, outputs, coupled):
    dt_window = config.model.window_length
    for out in outputs:
        j = out.time_index
        row = [truth.index, j, artifacts.fmt_float(j * dt_window)]
        vals = [truth.states[j], out.obs_mean, out.analysis_mean]
        if coupled:
            vals.append(out.output_mean)
        row += [artifacts.fmt_float(v) for v in np.concatenate(vals)]
        yield row


def write_run_csv(path, config, runs, coupled):
    """``runs`` is a list of ``(truth, outputs)`` pairs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(run_columns(config.model.dim, config.observation.obs_dim, coupled))
    for truth, outputs in runs:
        w.writerows(run_rows(config, truth, outputs, coupled))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_run_csv(path):
    """Returns ``{"columns", "trajectory", "step", "time", <prefix>: (rows, k) arrays}``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CorruptFileError(f"{path}: empty run file") from None
        rows = list(reader)
    if header[:3] != ["trajectory", "step", "time"]:
        raise CorruptFileError(f"{path}: unexpected header {header[:3]}")
    try:
        data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    except ValueError as exc:
        raise CorruptFileError(f"{path}: malformed rows ({exc})") from None
    out = {"columns": header, "trajectory": data[:, 0].astype(int), "step": data[:, 1].astype(int),
           "time": data[:, 2]}
    for prefix in ("truth", "obs_mean", "analysis_mean", "corrected_mean"):
        idx = [i for i, c in enumerate(header) if c.rsplit("_", 1)[0] == prefix]
        if idx:
            out[prefix] = data[:, idx]
    return out


def estimate_means(run):
    """The filter output of a run file: corrected means when present."""
    return run.get("corrected_mean", run["analysis_mean"])


def grouped(run, values):
    """Reshape per-row ``values`` to ``(K, T, d)`` ordered by trajectory then step."""
    ids = sorted(set(run["trajectory"].tolist()))
    blocks = []
    steps = None
    for k in ids:
        sel = run["trajectory"] == k
        order = np.argsort(run["step"][sel], kind="stable")
        s = run["step"][sel][order]
        if steps is None:
            steps = s
        elif not np.array_equal(steps, s):
            raise ContractViolation(f"trajectory {k} has a different step grid")
        blocks.append(values[sel][order])
    return ids, steps, np.stack(blocks)


# -- metrics ---------------------------------------------------------------

def write_epsilon_csv(path, steps, times, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(columns)
    w.writerow(["step", "time", *names])
    for i, step in enumerate(steps):
        w.writerow([int(step), artifacts.fmt_float(times[i]), *(artifacts.fmt_float(columns[n][i]) for n in names)])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    return path


def write_history_csv(path, history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    has_val = any("val_loss" in h for h in history)
    w.writerow(["epoch", "train_loss", "val_loss"] if has_val else ["epoch", "train_loss"])
    for h in history:
        row = [h["epoch"], artifacts.fmt_float(h["train_loss"])]
        if has_val:
            row.append(artifacts.fmt_float(h["val_loss"]))
        w.writerow(row)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    return path


# -- manifest --------------------------------------------------------------

def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_manifest(out_path, command, config=None, inputs=(), outputs=(), extra=None, started=None):
    """Sidecar ``<out>.manifest.json`` listing inputs and outputs with their hashes."""
    now = time.time()
    doc = {
        "format": MANIFEST_FORMAT,
        "version": VERSION,
        "tool": "enkf-fcnn",
        "tool_version": __version__,
        "command": command,
        "seed": None if config is None else config.seed,
        "config": None if config is None else config.document,
        "inputs": [{"path": str(p), "sha256": artifacts.file_sha256(p)} for p in inputs],
        "outputs": [{"path": str(p), "sha256": artifacts.file_sha256(p)} for p in outputs],
        "provenance": dict(extra or {}),
        "wall_clock": {
            "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(now)),
            "elapsed_seconds": None if started is None else now - started,
            "host": platform.node(),
            "user": _user(),
        },
    }
    return artifacts.write_json(manifest_path(out_path), doc)


def _user():
    try:
        return getpass.getuser()
    except (KeyError, OSError):
        return None


def read_manifest(out_path):
    path = manifest_path(out_path)
    if not path.exists():
        raise ProvenanceError(f"{out_path}: no manifest at {path}")
    doc = artifacts.read_json(path)
    _check_header(doc, MANIFEST_FORMAT, path)
    for entry in doc.get("outputs", []):
        if Path(entry["path"]).resolve() == Path(out_path).resolve():
            if artifacts.file_sha256(out_path) != entry["sha256"]:
                raise ProvenanceError(f"{out_path}: file does not match the hash in its manifest")
    return doc
