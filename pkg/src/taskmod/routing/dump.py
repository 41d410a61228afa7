import csv
from pathlib import Path

COLUMNS = ("layer", "task", "token_index", "score", "selected")


def write_score_csv(path, traces, append: bool = False) -> None:
    """Dump router scores: one row per (layer, sequence token).

    ``token_index`` is the position within the sequence; sequences of a batch
    are written consecutively.
    """
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(COLUMNS)
        for t in traces:
            if t.scores is None:
                continue
            for b, row in enumerate(t.scores):
                chosen = set(int(i) for i in t.selected[b]) if t.selected else set()
                for j, s in enumerate(row):
                    w.writerow([t.layer, t.task.value, j, f"{float(s):.9g}", int(j in chosen)])
