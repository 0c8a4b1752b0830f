"""Locality-aware job planning.

A plan assigns every fragment of the target dataset to exactly one alive
node. ALL-target jobs are pure locality: each fragment goes to an alive
holder (primary replica preferred, lowest-rank alive replica otherwise)
and nothing is ever transferred. Single-target jobs pin every fragment
to that node and schedule staging moves from the ingest store for the
fragments it does not hold yet. Ties are broken lexicographically so
identical catalog state always yields an identical plan.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .catalog import ALL_TARGET, DatasetRecord, JobRecord, NodeRecord, PlacementRecord

STORE_SOURCE = "store"


class PlanError(Exception):
    def __init__(self, message: str, missing: list[int] | None = None):
        super().__init__(message)
        self.missing = missing or []


@dataclass(frozen=True)
class StagingMove:
    fragment_index: int
    source: str  # "store" or a node name
    destination: str


@dataclass
class JobPlan:
    job_id: int
    dataset_id: int
    assignments: dict[str, tuple[int, ...]]
    staging_moves: list[StagingMove] = field(default_factory=list)
    filter_text: str = ""
    calibration: dict | None = None


def holders_by_preference(placements: list[PlacementRecord],
                          fragment_index: int) -> list[PlacementRecord]:
    found = [p for p in placements if p.fragment_index == fragment_index]
    return sorted(found, key=lambda p: (p.replica_rank, p.node))


def plan(job: JobRecord, dataset: DatasetRecord, placements: list[PlacementRecord],
         nodes: list[NodeRecord], store_fragments: set[int]) -> JobPlan:
    alive = {n.name for n in nodes if n.alive}
    spec = job.spec
    calibration = spec.calibration.to_json() if spec.calibration else None

    if spec.target == ALL_TARGET:
        assignment_sets: dict[str, list[int]] = {}
        missing = []
        for index in range(dataset.n_fragments):
            chosen = next(
                (p.node for p in holders_by_preference(placements, index)
                 if p.node in alive),
                None,
            )
            if chosen is None:
                missing.append(index)
            else:
                assignment_sets.setdefault(chosen, []).append(index)
        if missing:
            raise PlanError(
                "no alive holder for fragments: "
                + ", ".join(str(i) for i in missing),
                missing=missing,
            )
        assignments = {
            node: tuple(sorted(frags))
            for node, frags in sorted(assignment_sets.items())
        }
        return JobPlan(job.job_id, dataset.dataset_id, assignments, [],
                       spec.filter_text, calibration)

    target = spec.target
    if target not in {n.name for n in nodes}:
        raise PlanError(f"target node '{target}' is not registered")
    if target not in alive:
        raise PlanError(f"target node '{target}' is not alive")
    held = {p.fragment_index for p in placements if p.node == target}
    moves = []
    unstageable = []
    for index in range(dataset.n_fragments):
        if index in held:
            continue
        if index in store_fragments:
            moves.append(StagingMove(index, STORE_SOURCE, target))
        else:
            unstageable.append(index)
    if unstageable:
        raise PlanError(
            "fragments unavailable and unstageable: "
            + ", ".join(str(i) for i in unstageable),
            missing=unstageable,
        )
    assignments = {target: tuple(range(dataset.n_fragments))}
    return JobPlan(job.job_id, dataset.dataset_id, assignments, moves,
                   spec.filter_text, calibration)


def failover_targets(placements: list[PlacementRecord], fragment_indices: list[int],
                     alive: set[str], excluded: set[str]) -> dict[int, str]:
    """Pick an alive replica holder for each lost fragment.

    Raises PlanError naming the unrecoverable fragments if any lost
    fragment has no remaining alive holder.
    """
    chosen: dict[int, str] = {}
    unrecoverable = []
    for index in sorted(fragment_indices):
        node = next(
            (p.node for p in holders_by_preference(placements, index)
             if p.node in alive and p.node not in excluded),
            None,
        )
        if node is None:
            unrecoverable.append(index)
        else:
            chosen[index] = node
    if unrecoverable:
        raise PlanError(
            "unrecoverable fragments: " + ", ".join(str(i) for i in unrecoverable),
            missing=unrecoverable,
        )
    return chosen
