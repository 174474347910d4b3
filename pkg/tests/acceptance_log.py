"""Collects one verdict line per acceptance criterion for the terminal summary."""
import re

LINES = []


def report(label, title, ok, detail):
    label = str(label)
    line = f"criterion {label:<3} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    num, suffix = re.match(r"(\d+)(.*)", label).groups()
    LINES.append(((int(num), suffix), line))
    print(line)
    return ok
