"""
Brute-force reference for the metrics module, written with plain loops and no shared code.
Used only by the tests.
"""


def oracle_segment_f1(pred, truth):
    tp = fp = fn = 0
    for n in range(len(truth)):
        for t in range(len(truth[n])):
            for c in range(len(truth[n][t])):
                p = bool(pred[n][t][c])
                y = bool(truth[n][t][c])
                if p and y:
                    tp += 1
                elif p:
                    fp += 1
                elif y:
                    fn += 1
    if 2 * tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2 * tp + fp + fn)


def oracle_extract_events(labels):
    """List of (class, start, end) tuples by class then start"""
    events = []
    T = len(labels)
    C = len(labels[0]) if T else 0
    for c in range(C):
        t = 0
        while t < T:
            if labels[t][c]:
                start = t
                while t + 1 < T and labels[t + 1][c]:
                    t += 1
                events.append((c, start, t))
            t += 1
    return events


def oracle_iou(a, b):
    covered_a = set(range(a[1], a[2] + 1))
    covered_b = set(range(b[1], b[2] + 1))
    return len(covered_a & covered_b) / len(covered_a | covered_b)


def oracle_event_counts(pred, truth, miou=0.5):
    """Repeatedly take the best remaining same-class pair (highest IoU, then lowest indices)"""
    free_pred = set(range(len(pred)))
    free_truth = set(range(len(truth)))
    matched = 0
    while True:
        best = None
        for i in sorted(free_pred):
            for j in sorted(free_truth):
                if pred[i][0] != truth[j][0]:
                    continue
                iou = oracle_iou(pred[i], truth[j])
                if iou < miou:
                    continue
                if best is None or iou > best[0]:
                    best = (iou, i, j)
        if best is None:
            break
        free_pred.discard(best[1])
        free_truth.discard(best[2])
        matched += 1
    return matched, len(pred) - matched, len(truth) - matched


def oracle_event_f1(pred, truth, miou=0.5):
    tp, fp, fn = oracle_event_counts(pred, truth, miou)
    if 2 * tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2 * tp + fp + fn)


def _oracle_and(x, y):
    return [[[1 if x[n][t][c] and y[n][t][c] else 0 for c in range(len(x[n][t]))]
             for t in range(len(x[n]))] for n in range(len(x))]


def _oracle_f(tp, fp, fn):
    if 2 * tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2 * tp + fp + fn)


def _oracle_video_counts(pred, truth, level, miou):
    """Per-video (tp, fp, fn) for one stream"""
    rows = []
    for n in range(len(truth)):
        if level == "segment":
            tp = fp = fn = 0
            for t in range(len(truth[n])):
                for c in range(len(truth[n][t])):
                    p, y = pred[n][t][c], truth[n][t][c]
                    tp += 1 if p and y else 0
                    fp += 1 if p and not y else 0
                    fn += 1 if y and not p else 0
            rows.append((tp, fp, fn))
        else:
            rows.append(oracle_event_counts(oracle_extract_events(pred[n]), oracle_extract_events(truth[n]), miou))
    return rows


def oracle_full_report(pred_a, pred_v, truth_a, truth_v, miou=0.5, averaging="micro"):
    """Dict with the ten scores, keyed like the metrics report"""
    streams = {
        "a": (pred_a, truth_a),
        "v": (pred_v, truth_v),
        "av": (_oracle_and(pred_a, pred_v), _oracle_and(truth_a, truth_v)),
    }
    report = {}
    for level in ("segment", "event"):
        rows = {code: _oracle_video_counts(p, y, level, miou) for code, (p, y) in streams.items()}
        rows["event_av"] = [tuple(a[i] + v[i] for i in range(3)) for a, v in zip(rows["a"], rows["v"])]
        for code in ("a", "v", "av", "event_av"):
            if averaging == "micro":
                total = [sum(row[i] for row in rows[code]) for i in range(3)]
                score = _oracle_f(*total)
            else:
                scores = [_oracle_f(*row) for row in rows[code]]
                score = sum(scores) / len(scores) if scores else 1.0
            report[f"{level}_{code}"] = score
        report[f"{level}_type_av"] = (report[f"{level}_a"] + report[f"{level}_v"] + report[f"{level}_av"]) / 3.0
    return report
