"""File formats: recording CSV + manifest, entry bundles, results CSV.

Every writer is byte-deterministic for fixed input. Floats that must
round-trip exactly are printed with 17 significant digits; sample
blocks live in an uncompressed-zip archive of standard binary arrays
written with a fixed timestamp.
"""
from __future__ import annotations

import io as _io
import os
import zipfile

import numpy as np

from . import util
from .errors import ConfigInvalid
from .evaluate import EstimateRecord
from .signals import Channel, Entry, Recording, Waveform

_CHANNEL_ORDER = (Channel.ECG, Channel.ABP, Channel.CBV, Channel.ICP)
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _fmt(x: float) -> str:
    return util._format_float(float(x))


# ---------------------------------------------------------------------------
# deterministic array archives


def save_arrays(path, arrays: dict) -> None:
    """Write named arrays to a zip of .npy members with fixed metadata.

    Readable with numpy.load; unlike the stock writer the member
    timestamps are pinned so identical arrays yield identical bytes.
    """
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = _io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]),
                                      allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def load_arrays(path) -> dict:
    out = {}
    with np.load(path) as data:
        for name in data.files:
            out[name] = data[name]
    return out


# ---------------------------------------------------------------------------
# recordings


def write_recording(rec: Recording, path) -> None:
    """One CSV per recording: time column plus one column per channel."""
    chans = [c for c in _CHANNEL_ORDER if c in rec.channels]
    if not chans:
        raise ConfigInvalid("recording has no channels")
    fs = rec.channels[chans[0]].fs
    n = len(rec.channels[chans[0]])
    for c in chans:
        w = rec.channels[c]
        if w.fs != fs or len(w) != n:
            raise ConfigInvalid("channels must share fs and length")
    cols = [rec.channels[c].samples for c in chans]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("time," + ",".join(c.value for c in chans) + "\n")
        for i in range(n):
            fh.write(_fmt(i / fs) + ","
                     + ",".join(_fmt(col[i]) for col in cols) + "\n")


def read_recording(path, patient_id: str, recording_id: str,
                   fs: float | None = None) -> Recording:
    """Parse a recording CSV; fs is taken from the time column if absent."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "time":
            raise ConfigInvalid(f"{path}: first column must be 'time'")
        names = header[1:]
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    if not rows:
        raise ConfigInvalid(f"{path}: no samples")
    data = np.array(rows, dtype=float)
    if fs is None:
        dt = np.diff(data[:, 0])
        if len(dt) < 1 or np.max(dt) - np.min(dt) > 1e-6:
            raise ConfigInvalid(f"{path}: time grid is not uniform")
        fs = 1.0 / float(np.median(dt))
    channels = {}
    for k, name in enumerate(names):
        ch = Channel(name)
        channels[ch] = Waveform(samples=data[:, k + 1], fs=float(fs),
                                channel=ch)
    return Recording(channels=channels, patient_id=patient_id,
                     recording_id=recording_id)


def write_manifest(descriptors: list, path) -> None:
    """Recording index: path, ids, fs, and channel list per recording."""
    util.dump_json({"version": 1, "recordings": descriptors}, path)


def read_manifest(path) -> list:
    d = util.load_json(path)
    if int(d.get("version", 1)) != 1:
        raise ConfigInvalid("unsupported manifest version")
    recs = d.get("recordings", [])
    for r in recs:
        for key in ("path", "patient_id", "recording_id"):
            if key not in r:
                raise ConfigInvalid(f"manifest entry missing {key!r}")
    return recs


def load_recordings(manifest_path) -> list:
    """Read every recording referenced by a manifest (relative paths)."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    out = []
    for desc in read_manifest(manifest_path):
        p = desc["path"]
        if not os.path.isabs(p):
            p = os.path.join(base, p)
        out.append(read_recording(p, desc["patient_id"],
                                  desc["recording_id"],
                                  fs=desc.get("fs")))
    return out


# ---------------------------------------------------------------------------
# entries


def write_entries(entries: list, json_path, array_path=None) -> None:
    """Entry bundle: JSON metadata plus a sibling array archive."""
    if array_path is None:
        array_path = os.path.splitext(str(json_path))[0] + ".npz"
    meta = []
    arrays = {}
    for i, e in enumerate(entries):
        chans = sorted(c.value for c in e.samples)
        for c in chans:
            arrays[f"{i:04d}_{c}"] = e.samples[Channel(c)]
        arrays[f"{i:04d}_beat_starts"] = e.beat_starts
        arrays[f"{i:04d}_rr_series"] = e.rr_series
        arrays[f"{i:04d}_abp_onsets"] = e.abp_onsets
        arrays[f"{i:04d}_cbv_onsets"] = e.cbv_onsets
        if e.icp_onsets is not None:
            arrays[f"{i:04d}_icp_onsets"] = e.icp_onsets
        meta.append({
            "entry_id": e.entry_id, "patient_id": e.patient_id,
            "recording_id": e.recording_id, "fs": float(e.fs),
            "has_ecg": bool(e.has_ecg), "channels": chans,
            "has_icp_onsets": e.icp_onsets is not None,
            "mean_icp": None if e.mean_icp is None else float(e.mean_icp),
        })
    util.dump_json({"version": 1,
                    "arrays": os.path.basename(str(array_path)),
                    "entries": meta}, json_path)
    save_arrays(array_path, arrays)


def read_entries(json_path) -> list:
    d = util.load_json(json_path)
    if int(d.get("version", 1)) != 1:
        raise ConfigInvalid("unsupported entries version")
    array_path = os.path.join(os.path.dirname(os.path.abspath(json_path)),
                              d["arrays"])
    arrays = load_arrays(array_path)
    out = []
    for i, m in enumerate(d["entries"]):
        samples = {Channel(c): arrays[f"{i:04d}_{c}"]
                   for c in m["channels"]}
        out.append(Entry(
            entry_id=m["entry_id"], patient_id=m["patient_id"],
            recording_id=m["recording_id"], fs=float(m["fs"]),
            has_ecg=bool(m["has_ecg"]), samples=samples,
            beat_starts=arrays[f"{i:04d}_beat_starts"],
            rr_series=arrays[f"{i:04d}_rr_series"],
            abp_onsets=arrays[f"{i:04d}_abp_onsets"],
            cbv_onsets=arrays[f"{i:04d}_cbv_onsets"],
            icp_onsets=arrays.get(f"{i:04d}_icp_onsets"),
            mean_icp=m.get("mean_icp"),
        ))
    return out


# ---------------------------------------------------------------------------
# estimation results


_RESULT_HEADER = ("entry_id,patient_id,scenario,algorithm,est_mean_icp,"
                  "true_mean_icp,chosen_model_ids\n")


def write_results(results: list, entries: list, algorithm: str,
                  path) -> None:
    """One CSV row per estimate; truth column empty when unavailable."""
    truth = {e.entry_id: (e.mean_icp, e.patient_id) for e in entries}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_RESULT_HEADER)
        for r in results:
            mean_icp, pid = truth.get(r.entry_id, (None, ""))
            fh.write(",".join([
                r.entry_id, pid, r.scenario, algorithm,
                _fmt(r.mean_nicp),
                "" if mean_icp is None else _fmt(mean_icp),
                ";".join(r.chosen_model_ids)]) + "\n")


def read_results(path) -> list:
    """Parse a results CSV into records consumable by the evaluator."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header + "\n" != _RESULT_HEADER:
            raise ConfigInvalid(f"{path}: unexpected results header")
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(",")
            if len(parts) != 7:
                raise ConfigInvalid(f"{path}: malformed results row")
            out.append(EstimateRecord(
                entry_id=parts[0], patient_id=parts[1], scenario=parts[2],
                algorithm=parts[3], est_mean_icp=float(parts[4]),
                true_mean_icp=None if parts[5] == "" else float(parts[5])))
    return out
