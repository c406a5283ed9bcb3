"""Response-log ingestion and the canonical on-disk dataset format.

Raw exports (one row per response, with optional per-row skill tags) are
cleaned, densified, and written out as a set of flat CSV files that the
training, selection, and serving layers all consume:

    responses.csv        user_id,problem_id,correct,order_id
    q_matrix.csv         problem_id,skill_id         (one row per pair)
    knowledge_graph.csv  src_skill_id,dst_skill_id,relation
    knowledge_names.csv  skill_id,name
    item_texts.csv       problem_id,text
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd


class IngestError(ValueError):
    """Unusable raw input: missing file, missing column, or no usable rows."""


#: canonical column names; also the default schema for raw files
DEFAULT_SCHEMA = {
    "student": "user_id",
    "item": "problem_id",
    "skill": "skill_id",
    "correct": "correct",
    "order": "order_id",
}

RELATION_PREREQUISITE = "prerequisite"


@dataclass(frozen=True)
class ResponseRecord:
    student_id: int
    item_id: int
    correct: int
    order_index: int


@dataclass
class ResponseDataset:
    records: list[ResponseRecord]
    n_students: int
    n_items: int
    n_knowledge: int

    def __len__(self) -> int:
        return len(self.records)

    def by_student(self) -> dict[int, list[ResponseRecord]]:
        """Records grouped per student, ordered by order_index."""
        groups: dict[int, list[ResponseRecord]] = {}
        for rec in self.records:
            groups.setdefault(rec.student_id, []).append(rec)
        for recs in groups.values():
            recs.sort(key=lambda r: r.order_index)
        return groups

    def arrays(self):
        """(students, items, correct) as parallel integer lists."""
        ss = [r.student_id for r in self.records]
        qq = [r.item_id for r in self.records]
        rr = [r.correct for r in self.records]
        return ss, qq, rr


@dataclass
class QMatrix:
    rows: list[set[int]]

    def __post_init__(self):
        for item, skills in enumerate(self.rows):
            if not skills:
                raise IngestError(f"item {item} has zero knowledge ids")


@dataclass
class KnowledgeGraph:
    edges: list[tuple[int, int, str]] = field(default_factory=list)

    def prerequisites_of(self, knowledge_id: int) -> set[int]:
        """Direct prerequisite sources of edges pointing into knowledge_id."""
        return {
            src
            for src, dst, rel in self.edges
            if dst == knowledge_id and rel == RELATION_PREREQUISITE
        }


@dataclass
class IdMaps:
    student_map: dict[str, int] = field(default_factory=dict)
    item_map: dict[str, int] = field(default_factory=dict)
    knowledge_map: dict[str, int] = field(default_factory=dict)
    knowledge_names: list[str] = field(default_factory=list)
    item_texts: list[str] = field(default_factory=list)

    def raw_student(self, dense: int) -> str:
        return _inverse(self.student_map)[dense]

    def raw_item(self, dense: int) -> str:
        return _inverse(self.item_map)[dense]

    def raw_knowledge(self, dense: int) -> str:
        return _inverse(self.knowledge_map)[dense]

    def register_knowledge(self, raw: str) -> int:
        if raw not in self.knowledge_map:
            self.knowledge_map[raw] = len(self.knowledge_map)
            self.knowledge_names.append(f"skill {raw}")
        return self.knowledge_map[raw]


@dataclass
class IngestReport:
    rows_total: int = 0
    rows_kept: int = 0
    drops: dict[str, int] = field(default_factory=dict)
    n_students: int = 0
    n_items: int = 0
    n_knowledge: int = 0

    @property
    def rows_dropped(self) -> int:
        return sum(self.drops.values())

    def to_dict(self) -> dict:
        return {
            "rows_total": self.rows_total,
            "rows_kept": self.rows_kept,
            "rows_dropped": self.rows_dropped,
            "drops": dict(self.drops),
            "n_students": self.n_students,
            "n_items": self.n_items,
            "n_knowledge": self.n_knowledge,
        }


@dataclass
class DataBundle:
    """Everything downstream stages need, loaded in one piece."""

    dataset: ResponseDataset
    q_matrix: QMatrix
    graph: KnowledgeGraph
    id_maps: IdMaps


def _inverse(mapping: dict[str, int]) -> dict[int, str]:
    return {v: k for k, v in mapping.items()}


def _parse_binary(value) -> int | None:
    """Correctness parser: accept 0/1 in any numeric spelling, else None."""
    try:
        x = float(str(value).strip())
    except (TypeError, ValueError):
        return None
    if x == 0.0:
        return 0
    if x == 1.0:
        return 1
    return None


def parse_logs(
    raw_log_file: str | Path,
    schema: dict[str, str] | None = None,
) -> tuple[ResponseDataset, IdMaps, IngestReport]:
    """Parse a raw response log into a densified dataset.

    Rows missing the student, item, skill, or correctness field are dropped
    and counted; correctness values other than 0/1 are dropped as well.
    Ids are densified in first-appearance order and each student's rows are
    ordered by the configured order column (file order when absent).
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(raw_log_file)
    if not path.exists():
        raise IngestError(f"raw log file not found: {path}")

    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    required = [schema["student"], schema["item"], schema["correct"]]
    for col in required:
        if col not in df.columns:
            raise IngestError(f"missing column {col!r} in {path.name}")
    has_skill = schema.get("skill") in df.columns
    has_order = schema.get("order") in df.columns

    report = IngestReport(rows_total=len(df))
    maps = IdMaps()

    rows: list[tuple[str, str, int, float, int]] = []  # (stu, item, correct, order_key, file_row)
    seen_triples: set[tuple[str, str, str]] = set()
    for file_row, row in enumerate(df.itertuples(index=False)):
        row = row._asdict()
        stu = row[schema["student"]].strip()
        item = row[schema["item"]].strip()
        if not stu or not item:
            report.drops["missing_field"] = report.drops.get("missing_field", 0) + 1
            continue
        if has_skill:
            skill = row[schema["skill"]].strip()
            if not skill:
                report.drops["missing_field"] = report.drops.get("missing_field", 0) + 1
                continue
        correct = _parse_binary(row[schema["correct"]])
        if correct is None:
            report.drops["bad_correct"] = report.drops.get("bad_correct", 0) + 1
            continue
        if has_order:
            raw_order = row[schema["order"]].strip()
            triple = (stu, item, raw_order)
            if raw_order and triple in seen_triples:
                report.drops["duplicate"] = report.drops.get("duplicate", 0) + 1
                continue
            seen_triples.add(triple)
            try:
                order_key = float(raw_order)
            except ValueError:
                order_key = float(file_row)
        else:
            order_key = float(file_row)
        if stu not in maps.student_map:
            maps.student_map[stu] = len(maps.student_map)
        if item not in maps.item_map:
            maps.item_map[item] = len(maps.item_map)
            maps.item_texts.append(f"item {item}")
        if has_skill:
            maps.register_knowledge(skill)
        rows.append((stu, item, correct, order_key, file_row))

    if not rows:
        raise IngestError(f"no usable rows in {path.name}")

    per_student: dict[str, list[tuple[float, int, str, int]]] = {}
    for stu, item, correct, order_key, file_row in rows:
        per_student.setdefault(stu, []).append((order_key, file_row, item, correct))

    records: list[ResponseRecord] = []
    for stu, entries in per_student.items():
        entries.sort(key=lambda e: (e[0], e[1]))  # stable within equal order keys
        sid = maps.student_map[stu]
        for order_index, (_, _, item, correct) in enumerate(entries):
            records.append(
                ResponseRecord(sid, maps.item_map[item], correct, order_index)
            )
    records.sort(key=lambda r: (r.student_id, r.order_index))

    dataset = ResponseDataset(
        records=records,
        n_students=len(maps.student_map),
        n_items=len(maps.item_map),
        n_knowledge=len(maps.knowledge_map),
    )
    report.rows_kept = len(records)
    report.n_students = dataset.n_students
    report.n_items = dataset.n_items
    report.n_knowledge = dataset.n_knowledge
    return dataset, maps, report


def derive_mapping_from_log(
    raw_log_file: str | Path, schema: dict[str, str] | None = None
) -> list[tuple[str, str]]:
    """(item, skill) raw pairs taken from a per-row skill column."""
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    df = pd.read_csv(raw_log_file, dtype=str, keep_default_na=False)
    if schema["skill"] not in df.columns:
        raise IngestError(f"missing column {schema['skill']!r} for q-matrix derivation")
    pairs = []
    for _, row in df.iterrows():
        item = row[schema["item"]].strip()
        skill = row[schema["skill"]].strip()
        if item and skill:
            pairs.append((item, skill))
    return pairs


def build_q_matrix(
    mapping: str | Path | list[tuple[str, str]],
    id_maps: IdMaps,
) -> QMatrix:
    """Group an item-knowledge pair table into per-item knowledge sets.

    Every mapped item must already exist in id_maps; every item present in
    the responses must receive at least one knowledge id. Unknown raw skill
    ids are registered (an item may exercise a skill nobody has answered).
    """
    if isinstance(mapping, (str, Path)):
        path = Path(mapping)
        if not path.exists():
            raise IngestError(f"mapping file not found: {path}")
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
        for col in ("problem_id", "skill_id"):
            if col not in df.columns:
                raise IngestError(f"missing column {col!r} in {path.name}")
        pairs = [
            (row.problem_id.strip(), row.skill_id.strip())
            for row in df.itertuples(index=False)
        ]
    else:
        pairs = [(str(i).strip(), str(k).strip()) for i, k in mapping]

    rows: list[set[int]] = [set() for _ in range(len(id_maps.item_map))]
    for raw_item, raw_skill in pairs:
        if not raw_item or not raw_skill:
            continue
        if raw_item not in id_maps.item_map:
            raise IngestError(f"mapping references unknown item {raw_item!r}")
        kid = id_maps.register_knowledge(raw_skill)
        rows[id_maps.item_map[raw_item]].add(kid)

    missing = [item for item, skills in enumerate(rows) if not skills]
    if missing:
        raw = id_maps.raw_item(missing[0])
        raise IngestError(
            f"{len(missing)} item(s) have no knowledge mapping, e.g. item {raw!r}"
        )
    return QMatrix(rows=rows)


def parse_knowledge_graph(path: str | Path, id_maps: IdMaps) -> KnowledgeGraph:
    """Prerequisite edges between knowledge points; self-loops dropped,
    duplicates collapsed, unseen skills registered."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    for col in ("src_skill_id", "dst_skill_id", "relation"):
        if col not in df.columns:
            raise IngestError(f"missing column {col!r} in {Path(path).name}")
    edges: list[tuple[int, int, str]] = []
    seen = set()
    for row in df.itertuples(index=False):
        src, dst = row.src_skill_id.strip(), row.dst_skill_id.strip()
        rel = row.relation.strip() or RELATION_PREREQUISITE
        if not src or not dst or src == dst:
            continue
        key = (src, dst, rel)
        if key in seen:
            continue
        seen.add(key)
        edges.append((id_maps.register_knowledge(src), id_maps.register_knowledge(dst), rel))
    return KnowledgeGraph(edges=edges)


def attach_names(path: str | Path, id_maps: IdMaps) -> None:
    """Apply skill_id,name rows onto the knowledge name table."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    for col in ("skill_id", "name"):
        if col not in df.columns:
            raise IngestError(f"missing column {col!r} in {Path(path).name}")
    for row in df.itertuples(index=False):
        raw = row.skill_id.strip()
        if not raw:
            continue
        kid = id_maps.register_knowledge(raw)
        if row.name.strip():
            id_maps.knowledge_names[kid] = row.name.strip()


def attach_texts(path: str | Path, id_maps: IdMaps) -> None:
    """Apply problem_id,text rows onto the item text table (known items only)."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    for col in ("problem_id", "text"):
        if col not in df.columns:
            raise IngestError(f"missing column {col!r} in {Path(path).name}")
    for row in df.itertuples(index=False):
        raw = row.problem_id.strip()
        if raw in id_maps.item_map and row.text.strip():
            id_maps.item_texts[id_maps.item_map[raw]] = row.text.strip()


def split_dataset(
    dataset: ResponseDataset, test_fraction: float, seed: int = 0
) -> tuple[ResponseDataset, ResponseDataset]:
    """Chronological per-student split: the last ceil(fraction * count)
    records of each student's ordered log go to test. Students with a single
    record go wholly to train. The seed is accepted for interface stability;
    the split itself is order-determined.
    """
    if not (0.0 < test_fraction < 1.0):
        raise ValueError(f"test_fraction must be in (0,1), got {test_fraction}")
    train_records: list[ResponseRecord] = []
    test_records: list[ResponseRecord] = []
    for _, recs in sorted(dataset.by_student().items()):
        if len(recs) < 2:
            train_records.extend(recs)
            continue
        k = math.ceil(test_fraction * len(recs))
        train_records.extend(recs[: len(recs) - k])
        test_records.extend(recs[len(recs) - k :])
    counts = (dataset.n_students, dataset.n_items, dataset.n_knowledge)
    return (
        ResponseDataset(train_records, *counts),
        ResponseDataset(test_records, *counts),
    )


# ---------------------------------------------------------------------------
# canonical files
# ---------------------------------------------------------------------------

def write_canonical(
    out_dir: str | Path,
    dataset: ResponseDataset,
    q_matrix: QMatrix,
    id_maps: IdMaps,
    graph: KnowledgeGraph | None = None,
    report: IngestReport | None = None,
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    students = _inverse(id_maps.student_map)
    items = _inverse(id_maps.item_map)
    skills = _inverse(id_maps.knowledge_map)

    with open(out / "responses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "problem_id", "correct", "order_id"])
        for rec in dataset.records:
            w.writerow([students[rec.student_id], items[rec.item_id], rec.correct, rec.order_index])

    with open(out / "q_matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["problem_id", "skill_id"])
        for item, row in enumerate(q_matrix.rows):
            for kid in sorted(row):
                w.writerow([items[item], skills[kid]])

    with open(out / "knowledge_graph.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src_skill_id", "dst_skill_id", "relation"])
        for src, dst, rel in (graph.edges if graph else []):
            w.writerow([skills[src], skills[dst], rel])

    with open(out / "knowledge_names.csv", "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_ALL)
        w.writerow(["skill_id", "name"])
        for kid in range(len(id_maps.knowledge_map)):
            w.writerow([skills[kid], id_maps.knowledge_names[kid]])

    with open(out / "item_texts.csv", "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_ALL)
        w.writerow(["problem_id", "text"])
        for item in range(len(id_maps.item_map)):
            w.writerow([items[item], id_maps.item_texts[item]])

    if report is not None:
        with open(out / "ingest_report.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_canonical(data_dir: str | Path) -> DataBundle:
    """Load a canonical directory back into memory.

    Dense ids are reconstructed from file row order, so a write/load round
    trip reproduces the exact same maps and dataset.
    """
    data = Path(data_dir)
    maps = IdMaps()

    names_path = data / "knowledge_names.csv"
    if names_path.exists():
        df = pd.read_csv(names_path, dtype=str, keep_default_na=False)
        for row in df.itertuples(index=False):
            kid = maps.register_knowledge(row.skill_id.strip())
            if row.name.strip():
                maps.knowledge_names[kid] = row.name.strip()

    texts_path = data / "item_texts.csv"
    if texts_path.exists():
        df = pd.read_csv(texts_path, dtype=str, keep_default_na=False)
        for row in df.itertuples(index=False):
            raw = row.problem_id.strip()
            if raw not in maps.item_map:
                maps.item_map[raw] = len(maps.item_map)
                maps.item_texts.append(f"item {raw}")
            if row.text.strip():
                maps.item_texts[maps.item_map[raw]] = row.text.strip()

    dataset, parsed_maps, _ = parse_logs(data / "responses.csv")
    # merge response-derived maps onto the preloaded entity tables
    for raw in parsed_maps.student_map:
        maps.student_map.setdefault(raw, len(maps.student_map))
    for raw in parsed_maps.item_map:
        if raw not in maps.item_map:
            maps.item_map[raw] = len(maps.item_map)
            maps.item_texts.append(f"item {raw}")
    remap = {parsed_maps.item_map[raw]: maps.item_map[raw] for raw in parsed_maps.item_map}
    stu_remap = {parsed_maps.student_map[raw]: maps.student_map[raw] for raw in parsed_maps.student_map}
    records = [
        ResponseRecord(stu_remap[r.student_id], remap[r.item_id], r.correct, r.order_index)
        for r in dataset.records
    ]
    records.sort(key=lambda r: (r.student_id, r.order_index))

    q_matrix = build_q_matrix(data / "q_matrix.csv", maps)

    graph_path = data / "knowledge_graph.csv"
    graph = parse_knowledge_graph(graph_path, maps) if graph_path.exists() else KnowledgeGraph()

    dataset = ResponseDataset(
        records=records,
        n_students=len(maps.student_map),
        n_items=len(maps.item_map),
        n_knowledge=len(maps.knowledge_map),
    )
    return DataBundle(dataset=dataset, q_matrix=q_matrix, graph=graph, id_maps=maps)


def ingest_pipeline(
    raw_log: str | Path,
    out_dir: str | Path,
    mapping: str | Path | None = None,
    graph_file: str | Path | None = None,
    names_file: str | Path | None = None,
    texts_file: str | Path | None = None,
    schema: dict[str, str] | None = None,
) -> IngestReport:
    """Full ingest stage: raw files in, canonical directory out."""
    dataset, maps, report = parse_logs(raw_log, schema=schema)
    if mapping is not None:
        q_matrix = build_q_matrix(mapping, maps)
    else:
        q_matrix = build_q_matrix(derive_mapping_from_log(raw_log, schema=schema), maps)
    graph = parse_knowledge_graph(graph_file, maps) if graph_file else KnowledgeGraph()
    if names_file:
        attach_names(names_file, maps)
    if texts_file:
        attach_texts(texts_file, maps)
    dataset.n_knowledge = len(maps.knowledge_map)
    report.n_knowledge = dataset.n_knowledge
    write_canonical(out_dir, dataset, q_matrix, maps, graph, report)
    return report
