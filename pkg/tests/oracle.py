"""Independent single-process reference implementation.

Deliberately avoids the evaluator, executor and merge paths under test:
comparison dispatch is table-driven over a name->value mapping, and the
expected merged output is built straight from the original event list.
Only the AST node types and the codec are shared with the package.
"""

import operator

from geps.events import Event, FragmentFile, FragmentMeta
from geps.filters import And, Comparison, Group, Or, parse

OPS = {
    "<": operator.lt,
    ">": operator.gt,
    "<=": operator.le,
    ">=": operator.ge,
    "==": operator.eq,
    "!=": operator.ne,
}


def eval_expr(node, values_by_name):
    if isinstance(node, Comparison):
        return OPS[node.op](values_by_name[node.variable], node.literal)
    if isinstance(node, Group):
        return eval_expr(node.inner, values_by_name)
    if isinstance(node, And):
        return eval_expr(node.left, values_by_name) and eval_expr(node.right, values_by_name)
    if isinstance(node, Or):
        return eval_expr(node.left, values_by_name) or eval_expr(node.right, values_by_name)
    raise TypeError(node)


def calibrated_values(event, schema, cal_entries):
    out = {}
    for name, value in zip(schema.variables, event.values):
        if name in cal_entries:
            scale, offset = cal_entries[name]
            value = scale * value + offset
        out[name] = value
    return out


def passing_events(events, schema, filter_text, cal_entries=None):
    """Calibrated passing events, in original dataset order."""
    expr = parse(filter_text)
    cal_entries = cal_entries or {}
    kept = []
    for event in events:
        values = calibrated_values(event, schema, cal_entries)
        if eval_expr(expr, values):
            kept.append(Event(
                event.event_id,
                tuple(values[name] for name in schema.variables),
                event.tracks,
                event.vertices,
                event.payload,
            ))
    return kept


def expected_merged_fragment(events, schema, dataset_id, filter_text, cal_entries=None):
    """What scan -> calibrate -> filter -> merge must produce for a whole dataset."""
    kept = passing_events(events, schema, filter_text, cal_entries)
    meta = FragmentMeta(
        dataset_id=dataset_id,
        fragment_index=0,
        event_count=len(kept),
        first_event_ordinal=0,
    )
    return FragmentFile(meta=meta, schema=schema, events=kept)
