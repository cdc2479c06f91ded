"""Durable run store: one directory tree per run, one artifact per completed
stage step.

Layout:

    <store_root>/<run_id>/
        config.json
        ledger/costs.{json,txt}
        reports/...
        instances/<instance_id>/
            context/context.json
            trajectories/testing-00.json, editing-00.json, *.journal.jsonl
            candidates/candidates.json
            matrix/matrix.json
            selection/<method>.json
            metrics/metrics.json

The presence of a stage's artifact means that stage is complete for the
instance; journals are working state for resumption, not completion markers.
All JSON artifacts are written atomically with sorted keys so identical runs
produce byte-identical trees.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from patchpool.core import (
    CandidateSample,
    ContractViolation,
    Instance,
    SourceFileFilter,
    Trajectory,
    read_artifact,
    write_artifact,
)
from patchpool.selection import SelectionReport, VoteMatrix


def load_dataset(dataset_dir: Path) -> list[Instance]:
    """Read every instance descriptor under the dataset directory.

    A descriptor is a ``<instance_id>.json`` file; its snapshot path is
    resolved relative to the dataset directory.
    """
    dataset_dir = Path(dataset_dir)
    instances: list[Instance] = []
    for path in sorted(dataset_dir.glob("*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        filter_doc = doc.get("source_file_filter")
        oracle = doc.get("oracle_eval")
        snapshot = (dataset_dir / doc["snapshot"]).resolve()
        if not snapshot.is_dir():
            raise ContractViolation(f"{path.name}: snapshot dir missing: {snapshot}")
        instances.append(
            Instance(
                instance_id=doc["instance_id"],
                issue_text=doc["issue_text"],
                codebase_ref=snapshot,
                source_file_filter=(
                    SourceFileFilter.from_doc(filter_doc) if filter_doc else SourceFileFilter()
                ),
                gold_edit_files=tuple(doc.get("gold_edit_files", ())),
                oracle_eval=tuple(oracle) if oracle else None,
            )
        )
    if not instances:
        raise ContractViolation(f"no instance descriptors found in {dataset_dir}")
    ids = [i.instance_id for i in instances]
    if len(set(ids)) != len(ids):
        raise ContractViolation("duplicate instance_id in dataset")
    return sorted(instances, key=lambda i: i.instance_id)


class RunStore:
    """Paths and typed readers/writers for one run's artifact tree."""

    def __init__(self, root: Path, run_id: str):
        self.run_dir = Path(root) / run_id
        self.run_id = run_id

    def sweep_tmp_files(self) -> int:
        """Drop crash residue left by interrupted atomic writes.

        write_artifact stages ".tmp-*" files next to their target and
        renames; a hard kill between the two leaves the stage file behind.
        Resumed runs must converge to the same bytes as uninterrupted ones,
        so the residue goes before any stage touches the tree.
        """
        removed = 0
        if self.run_dir.is_dir():
            for path in self.run_dir.rglob(".tmp-*"):
                if path.is_file():
                    path.unlink()
                    removed += 1
        return removed

    # -- run-level paths ---------------------------------------------------

    @property
    def config_path(self) -> Path:
        return self.run_dir / "config.json"

    @property
    def ledger_dir(self) -> Path:
        return self.run_dir / "ledger"

    @property
    def reports_dir(self) -> Path:
        return self.run_dir / "reports"

    def instance_dir(self, instance_id: str) -> Path:
        return self.run_dir / "instances" / instance_id

    # -- per-instance artifact paths ---------------------------------------

    def context_path(self, instance_id: str) -> Path:
        return self.instance_dir(instance_id) / "context" / "context.json"

    def trajectory_path(self, instance_id: str, trajectory_id: str) -> Path:
        return self.instance_dir(instance_id) / "trajectories" / f"{trajectory_id}.json"

    def journal_path(self, instance_id: str, trajectory_id: str) -> Path:
        return (
            self.instance_dir(instance_id)
            / "trajectories"
            / f"{trajectory_id}.journal.jsonl"
        )

    def candidates_path(self, instance_id: str) -> Path:
        return self.instance_dir(instance_id) / "candidates" / "candidates.json"

    def ensemble_pool_path(self, instance_id: str) -> Path:
        return self.instance_dir(instance_id) / "candidates" / "ensemble_pool.json"

    def matrix_path(self, instance_id: str) -> Path:
        return self.instance_dir(instance_id) / "matrix" / "matrix.json"

    def selection_path(self, instance_id: str, method: str) -> Path:
        return self.instance_dir(instance_id) / "selection" / f"{method}.json"

    def metrics_path(self, instance_id: str) -> Path:
        return self.instance_dir(instance_id) / "metrics" / "metrics.json"

    def predictions_path(self, method: str) -> Path:
        return self.reports_dir / f"predictions-{method}.json"

    # -- typed accessors ----------------------------------------------------

    def write_config(self, doc: dict[str, Any]) -> None:
        write_artifact(self.config_path, doc)

    def write_context(self, instance_id: str, doc: dict[str, Any]) -> None:
        write_artifact(self.context_path(instance_id), doc)

    def read_context(self, instance_id: str) -> dict[str, Any]:
        return read_artifact(self.context_path(instance_id))

    def write_trajectory(self, instance_id: str, trajectory: Trajectory) -> None:
        write_artifact(
            self.trajectory_path(instance_id, trajectory.trajectory_id),
            trajectory.to_doc(),
        )

    def read_trajectory(self, instance_id: str, trajectory_id: str) -> Trajectory:
        return Trajectory.from_doc(read_artifact(self.trajectory_path(instance_id, trajectory_id)))

    def write_candidates(self, instance_id: str, candidates: list[CandidateSample]) -> None:
        write_artifact(
            self.candidates_path(instance_id),
            {
                "kind": "candidate_pool",
                "schema_version": 1,
                "instance_id": instance_id,
                "candidates": [c.to_doc() for c in candidates],
            },
        )

    def read_candidates(self, instance_id: str) -> list[CandidateSample]:
        doc = read_artifact(self.candidates_path(instance_id))
        return [CandidateSample.from_doc(d) for d in doc["candidates"]]

    def write_ensemble_pool(self, instance_id: str, pool: list[CandidateSample]) -> None:
        write_artifact(
            self.ensemble_pool_path(instance_id),
            {
                "kind": "ensemble_pool",
                "schema_version": 1,
                "instance_id": instance_id,
                "candidates": [c.to_doc() for c in pool],
            },
        )

    def read_ensemble_pool(self, instance_id: str) -> list[CandidateSample]:
        doc = read_artifact(self.ensemble_pool_path(instance_id))
        return [CandidateSample.from_doc(d) for d in doc["candidates"]]

    def write_matrix(self, instance_id: str, matrix: VoteMatrix) -> None:
        write_artifact(self.matrix_path(instance_id), matrix.to_doc())

    def read_matrix(self, instance_id: str) -> VoteMatrix:
        return VoteMatrix.from_doc(read_artifact(self.matrix_path(instance_id)))

    def write_selection(self, instance_id: str, method: str, report: SelectionReport) -> None:
        write_artifact(self.selection_path(instance_id, method), report.to_doc())

    def read_selection(self, instance_id: str, method: str) -> SelectionReport:
        return SelectionReport.from_doc(read_artifact(self.selection_path(instance_id, method)))

    def selection_methods(self, instance_id: str) -> list[str]:
        selection_dir = self.instance_dir(instance_id) / "selection"
        if not selection_dir.is_dir():
            return []
        return sorted(p.stem for p in selection_dir.glob("*.json"))

    def trajectory_ids(self, instance_id: str, prefix: str) -> list[str]:
        traj_dir = self.instance_dir(instance_id) / "trajectories"
        if not traj_dir.is_dir():
            return []
        return sorted(p.stem for p in traj_dir.glob(f"{prefix}-*.json"))
