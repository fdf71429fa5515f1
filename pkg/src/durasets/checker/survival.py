"""Diagnostic labels for operations left pending by a crash.

A pending update *survived* when the persistent write that commits it reached
persistent memory before the crash, judged from the heap's flush log (psyncs,
evictions and the write-backs chosen at the crash itself):

* link-free insert: its node was written back while valid and holding the key;
* link-free remove: the node it marked was written back marked;
* SOFT insert: the PNode it linked was written back as a member with the
  node's pValidity;
* SOFT remove (the thread that won the right to delete): the PNode was written
  back with deleted equal to its pValidity.

Labels explain checker verdicts; they are not part of them.
"""

from __future__ import annotations

from ..hashmap import structure_variant
from .. import linkfree, soft
from .scenario import ScenarioRun

SURVIVED = "survived"
NOT_SURVIVED = "not"
NOT_APPLICABLE = "not-applicable"


def _written_after(log, addr: int, since: int, pred) -> bool:
    return any(rec.line_addr == addr and pred(rec.image) for rec in log[since:])


def _lf_label(op, trace, log) -> str:
    node = trace.get("node")
    if node is None:
        return NOT_SURVIVED
    since = trace.get("log_at", 0)
    if op.name == "insert":
        def ok(img):
            _, valid, _ = linkfree.image_state(img)
            return valid and linkfree.KEY.unpack(img) == op.key
    else:
        def ok(img):
            return linkfree.image_state(img)[2]
    return SURVIVED if _written_after(log, node, since, ok) else NOT_SURVIVED


def _soft_label(op, trace, log) -> str:
    pnode = trace.get("pnode")
    if pnode is None:
        return NOT_SURVIVED
    pv, since = trace["pvalidity"], trace.get("log_at", 0)
    if op.name == "insert":
        if not trace.get("linked"):
            return NOT_APPLICABLE

        def ok(img):
            return soft.image_state(img) == "member" and soft.VALID_START.unpack(img) == pv
    else:
        if not trace.get("won"):
            return NOT_APPLICABLE

        def ok(img):
            return soft.DELETED_FLAG.unpack(img) == pv
    return SURVIVED if _written_after(log, pnode, since, ok) else NOT_SURVIVED


def classify_surviving(run: ScenarioRun) -> dict[int, str]:
    """Operation id -> survived / not / not-applicable."""
    variant, _ = structure_variant(run.scenario.variant)
    labels = {}
    for op in run.history.operations():
        if not op.pending:
            labels[op.id] = SURVIVED
        elif op.name == "contains" or op.era >= len(run.recovered):
            labels[op.id] = NOT_APPLICABLE
        else:
            trace = run.traces.get(op.invoke, {})
            log = run.flush_logs[op.era]
            label = _lf_label if variant == "link-free" else _soft_label
            labels[op.id] = label(op, trace, log)
    return labels
