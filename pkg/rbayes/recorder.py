import json
import logging
import os
from typing import Any, Iterable

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from .errors import ConfigError
from .sampler import PosteriorChains
from .structs import DatasetRecord

logger = logging.getLogger()

DATASET_SUFFIX = ".jsonl"
CHAIN_INDEX = ["chain", "draw"]


def _ensure_parent(filename: str) -> None:
    parent = os.path.dirname(filename)
    if parent:
        os.makedirs(parent, exist_ok=True)


class Recorder:
    """JSON-lines dataset file: one `DatasetRecord` per line, UTF-8, LF endings."""

    def __init__(self, filename: str) -> None:
        self.filename = filename
        _ensure_parent(filename)

    def record(self, record: DatasetRecord) -> None:
        """Append one record to the file."""
        with open(self.filename, "a", encoding="utf-8", newline="\n") as f:
            f.write(record.to_json_line())
            f.write("\n")

    def write(self, records: Iterable[DatasetRecord]) -> int:
        """Replace the file with `records`; returns how many were written."""
        count = 0
        with open(self.filename, "w", encoding="utf-8", newline="\n") as f:
            for r in records:
                f.write(r.to_json_line())
                f.write("\n")
                count += 1
        logger.info(f"wrote {count} records to {self.filename}")
        return count

    def get(self) -> list[DatasetRecord]:
        """Load every record; a malformed line raises ConfigError naming it."""
        if not os.path.isfile(self.filename):
            raise ConfigError(f"dataset file {self.filename} does not exist")
        records: list[DatasetRecord] = []
        with open(self.filename, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(DatasetRecord.model_validate_json(line))
                except ValidationError as e:
                    raise ConfigError(f"{self.filename}:{lineno}: invalid record: {e}") from e
        return records

    def __repr__(self) -> str:
        return f"<Recorder file={self.filename}>"


def write_json(filename: str, payload: BaseModel | dict[str, Any]) -> None:
    _ensure_parent(filename)
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2, default=_json_default)
    with open(filename, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
        f.write("\n")
    logger.info(f"wrote {filename}")


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, BaseModel):
        return value.model_dump()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def chains_frame(chains: PosteriorChains) -> pd.DataFrame:
    n_chains, n_draws, _ = chains.draws.shape
    index = pd.MultiIndex.from_product([range(n_chains), range(n_draws)], names=CHAIN_INDEX)
    flat = chains.draws.reshape(n_chains * n_draws, -1)
    return pd.DataFrame(flat, index=index, columns=chains.names).reset_index()


def write_chains(filename: str, chains: PosteriorChains) -> None:
    """CSV with header `chain,draw,<names>`, one row per kept draw."""
    _ensure_parent(filename)
    chains_frame(chains).to_csv(filename, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"wrote {chains.n_chains} chain(s) x {chains.n_draws} draws to {filename}")


def read_chains(filename: str) -> PosteriorChains:
    """Inverse of `write_chains`; malformed files raise ConfigError."""
    try:
        df = pd.read_csv(filename)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"cannot read chains file {filename}: {e}") from e
    if list(df.columns[:2]) != CHAIN_INDEX or df.shape[1] < 3:
        raise ConfigError(f"{filename}: header must start with 'chain,draw' and name a quantity")
    if df.empty:
        raise ConfigError(f"{filename}: no draws")
    names = [str(c) for c in df.columns[2:]]
    try:
        values = df[names].to_numpy(dtype=np.float64)
        chain_ids = df["chain"].to_numpy(dtype=np.int64)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{filename}: non-numeric entries: {e}") from e
    groups = [values[chain_ids == c] for c in np.unique(chain_ids)]
    lengths = {g.shape[0] for g in groups}
    if len(lengths) != 1:
        raise ConfigError(f"{filename}: chains have unequal lengths {sorted(lengths)}")
    return PosteriorChains.from_columns(names, np.stack(groups))


def write_frame(filename: str, frame: pd.DataFrame, index: bool = False) -> None:
    _ensure_parent(filename)
    frame.to_csv(filename, index=index, float_format="%.17g", lineterminator="\n")
    logger.info(f"wrote {filename}")
