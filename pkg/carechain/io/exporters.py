"""
Artifact writers and readers. Every artifact is a pure function of the run,
so two runs with the same seed write byte-identical files.
"""

import json
import logging
import os
from typing import Dict, List, Sequence

import pandas as pd

from carechain.ledger import Chain, chain_summary, decode_chain, encode_chain
from carechain.schemas import AnomalyInjection, DecisionRecord, VitalsSample
from carechain.telemetry import VITALS_COLUMNS

logger = logging.getLogger(__name__)

DECISION_COLUMNS = ["t_ms", "principal", "resource", "action", "permit", "matched_policy",
                    "consent_checked", "block_index", "tx_index", "reason"]


def write_vitals_csv(streams: Dict[str, Sequence[VitalsSample]], path: str) -> None:
    rows = [s.model_dump(mode="json") for pid in sorted(streams) for s in streams[pid]]
    df = pd.DataFrame(rows, columns=VITALS_COLUMNS)
    df.to_csv(path, index=False)
    logger.info(f"Wrote {len(df)} samples to {path}")


def write_injections_csv(injections: Sequence[AnomalyInjection], path: str) -> None:
    df = pd.DataFrame([i.model_dump(mode="json") for i in injections], columns=list(AnomalyInjection.model_fields))
    df.to_csv(path, index=False)
    logger.info(f"Wrote {len(df)} injections to {path}")


def write_decisions_csv(decisions: Sequence[DecisionRecord], path: str) -> None:
    df = pd.DataFrame([d.model_dump(mode="json") for d in decisions], columns=list(DecisionRecord.model_fields))
    df[DECISION_COLUMNS].to_csv(path, index=False)
    logger.info(f"Wrote {len(df)} access decisions to {path}")


def write_chain(chain: Chain, output_dir: str, stem: str = "chain") -> List[str]:
    """Binary export plus a human-readable JSON dump."""
    os.makedirs(output_dir, exist_ok=True)
    bin_path = os.path.join(output_dir, f"{stem}.bin")
    json_path = os.path.join(output_dir, f"{stem}.json")
    with open(bin_path, "wb") as f:
        f.write(encode_chain(chain))
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(chain_summary(chain), f, indent=2)
        f.write("\n")
    logger.info(f"Wrote {len(chain)} blocks to {bin_path}")
    return [bin_path, json_path]


def read_chain(path: str) -> Chain:
    """Raises ChainDecodeError on malformed input."""
    with open(path, "rb") as f:
        return decode_chain(f.read())


def write_trace_ndjson(trace: Sequence[Dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for entry in trace:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    logger.info(f"Wrote {len(trace)} trace events to {path}")
