from pathlib import Path

import pandas as pd
import yaml


def load_yaml(path):
    """Load a YAML mapping from disk."""
    path = Path(path)
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at the top level, got {type(data).__name__}")
    return data


def dump_yaml(data, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
    return path


def read_raw_rows(path, header=False):
    """Read a comma separated numeric file as strings, one row per record.

    Short rows come back padded with NaN; rows longer than the first raise
    pandas' ParserError, whose message names the offending line.
    """
    return pd.read_csv(
        Path(path),
        header=None,
        skiprows=1 if header else 0,
        dtype=str,
        keep_default_na=False,
        na_values=[],
        skip_blank_lines=True,
        engine="c",
    )


def read_score_table(path):
    """Comparison table: header row of strategy names, one row per repetition block."""
    frame = pd.read_csv(Path(path))
    return frame.apply(pd.to_numeric, errors="raise")


def write_frame(frame, path, index=False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format="%.10g", lineterminator="\n")
    return path


def write_text(text, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


