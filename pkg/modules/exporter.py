"""
Exporter Module
Writes manifests, exported pairs, match files and reports to disk, and
turns report rows into JSON-safe records and tables.
"""
import json
import logging
import os
from datetime import datetime
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from modules.errors import ConfigError
from modules.features import save_feature_set
from modules.gnn import LayerAttention
from modules.matcher import MatchSet
from modules.synthgen import DatasetManifest, GroundTruthLabels, generate_pairs

logger = logging.getLogger(__name__)


def clean_value(val):
    """JSON-compliant scalar: NaN/Inf become None, numpy scalars become Python ones."""
    if val is None:
        return None
    if isinstance(val, (float, np.floating)):
        if np.isinf(val) or np.isnan(val):
            return None
        return float(val)
    if isinstance(val, np.integer):
        return int(val)
    if isinstance(val, np.bool_):
        return bool(val)
    if isinstance(val, np.ndarray):
        return [clean_value(v) for v in val.tolist()]
    if isinstance(val, dict):
        return {str(k): clean_value(v) for k, v in val.items()}
    if isinstance(val, (list, tuple)):
        return [clean_value(v) for v in val]
    if isinstance(val, np.generic):
        return str(val)
    return val


def clean_records(records: Iterable[Dict[str, Any]]) -> List[Dict[str, Any]]:
    return [{str(key): clean_value(value) for key, value in record.items()} for record in records]


def records_table(records: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """Flatten nested records into a table with snake_case columns."""
    if not records:
        return pd.DataFrame()
    df = pd.json_normalize(list(records))
    df.columns = [col.replace(".", "_").lower() for col in df.columns]
    return df


def timestamped_path(directory: str, prefix: str, extension: str) -> str:
    filename = f"{prefix}_{datetime.now().strftime('%Y%m%d_%H%M%S')}.{extension}"
    return os.path.join(directory, filename)


def _ensure_parent(path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def save_json(data: Any, path: str, sort_keys: bool = False) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(clean_value(data), f, indent=2, sort_keys=sort_keys)
        f.write("\n")
    logger.info("JSON saved to %s", path)
    return path


def load_json(path: str) -> Any:
    if not os.path.exists(path):
        raise ConfigError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def save_table(df: pd.DataFrame, path: str) -> str:
    _ensure_parent(path)
    df.to_csv(path, index=False)
    logger.info("Table saved to %s", path)
    return path


def save_manifest(manifest: DatasetManifest, path: str) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write(manifest.to_json())
        f.write("\n")
    logger.info("Manifest saved to %s", path)
    return path


def load_manifest(path: str) -> DatasetManifest:
    data = load_json(path)
    try:
        return DatasetManifest.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path} is not a dataset manifest: {exc}") from exc


def save_matches(matches: MatchSet, path: str) -> str:
    return save_json(matches.to_dict(), path)


def load_matches(path: str) -> MatchSet:
    return MatchSet.from_dict(load_json(path))


def save_labels(labels: GroundTruthLabels, path: str, homography: Optional[List[float]] = None) -> str:
    data = labels.to_dict()
    if homography is not None:
        data["homography"] = homography
    return save_json(data, path)


def load_labels(path: str) -> GroundTruthLabels:
    data = load_json(path)
    try:
        return GroundTruthLabels.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path} is not a label file: {exc}") from exc


def save_attention(attention: Sequence[LayerAttention], spans: Sequence, path: str) -> str:
    """Per-block weights with the LayerSpan of each block from attention_span."""
    return save_json({
        "layers": [
            {
                "layer": record.layer,
                "edge_type": record.edge_type,
                "span": span.span,
                "span_per_head": span.per_head,
                "weights_a": [w.tolist() for w in record.weights_a],
                "weights_b": [w.tolist() for w in record.weights_b],
            }
            for record, span in zip(attention, spans)
        ]
    }, path)


def load_attention(path: str) -> List[LayerAttention]:
    data = load_json(path)
    try:
        return [
            LayerAttention(
                int(layer["layer"]),
                layer["edge_type"],
                [np.asarray(w, dtype=np.float64) for w in layer["weights_a"]],
                [np.asarray(w, dtype=np.float64) for w in layer["weights_b"]],
            )
            for layer in data["layers"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path} is not an attention recording: {exc}") from exc


def export_pairs(manifest: DatasetManifest, out_dir: str, jobs: int = 1) -> List[str]:
    """Write every pair of a finite manifest as two SGFM files plus a labels JSON."""
    if manifest.num_pairs is None:
        raise ConfigError("cannot export an unbounded manifest")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    pairs = generate_pairs(manifest, range(manifest.num_pairs), jobs)
    for index, pair in enumerate(pairs):
        stem = os.path.join(out_dir, f"pair_{index:05d}")
        save_feature_set(pair.features_a, f"{stem}_a.sgfm")
        save_feature_set(pair.features_b, f"{stem}_b.sgfm")
        save_labels(pair.labels, f"{stem}_labels.json", pair.homography.to_list())
        written.append(stem)
    logger.info("Exported %d pairs to %s", len(written), out_dir)
    return written
