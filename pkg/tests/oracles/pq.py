"""Panoptic quality by exhaustive segment matching.

Every ground-truth segment is compared with every predicted segment of
the same class; a pair matches when IoU > 0.5. Points whose ground truth
is ignore are removed before segments are formed. Stuff classes form one
segment per class.
"""

from collections import defaultdict

IGNORE = 0xFFFF


def _segments(sem, inst, things, keep):
    segs = defaultdict(set)
    for i, (s, t) in enumerate(zip(sem, inst)):
        if not keep[i] or s == IGNORE:
            continue
        segs[(s, t if s in things else 0)].add(i)
    return segs


def pq_reference(scans, num_classes, thing_ids):
    """scans: iterable of (pred_sem, pred_inst, gt_sem, gt_inst) lists. Returns per-class dicts."""
    things = set(thing_ids)
    tp = [0] * num_classes
    fp = [0] * num_classes
    fn = [0] * num_classes
    iou_sum = [0.0] * num_classes
    for ps, pi, gs, gi in scans:
        keep = [g != IGNORE for g in gs]
        g_segs = _segments(gs, gi, things, keep)
        p_segs = _segments(ps, pi, things, keep)
        matched_p = set()
        for gk, gset in g_segs.items():
            hit = None
            for pk, pset in p_segs.items():
                if pk[0] != gk[0]:
                    continue
                inter = len(gset & pset)
                iou = inter / len(gset | pset)
                if iou > 0.5:
                    hit = (pk, iou)
            if hit is None:
                fn[gk[0]] += 1
            else:
                tp[gk[0]] += 1
                iou_sum[gk[0]] += hit[1]
                matched_p.add(hit[0])
        for pk in p_segs:
            if pk not in matched_p:
                fp[pk[0]] += 1
    out = {}
    for c in range(num_classes):
        denom = tp[c] + 0.5 * fp[c] + 0.5 * fn[c]
        if denom == 0:
            continue
        out[c] = {
            "TP": tp[c], "FP": fp[c], "FN": fn[c],
            "PQ": iou_sum[c] / denom,
            "RQ": tp[c] / denom,
            "SQ": iou_sum[c] / tp[c] if tp[c] else 0.0,
        }
    return out
