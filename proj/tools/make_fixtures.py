#!/usr/bin/env python3
"""Regenerates the mock-backend fixtures under fixtures/.

planted/   parity task (is nXX even or odd?), 16 train / 50 test examples.
           With L=4 the table LM makes group 0 (demos 0-3) answer correctly,
           groups 1-3 answer wrongly whenever the last digit is 0-4, and the
           full 16-demo prompt behaves like a noise group.
uniform/   32 equal-length demos, 20 test inputs, and an oracle table that
           always emits the gold label. Used for cost accounting checks.

Output is deterministic; run from the repository root.
"""

import json
import pathlib

ROOT = pathlib.Path(__file__).resolve().parent.parent / "fixtures"

TEMPLATE = {"demo": "Question: {input}\nAnswer: {output}",
            "query": "Question: {input}\nAnswer:",
            "separator": "\n\n"}


def render(inp, out):
    return TEMPLATE["demo"].replace("{input}", inp).replace("{output}", out)


def write_jsonl(path, rows):
    with open(path, "w") as f:
        for inp, out in rows:
            f.write(json.dumps({"input": inp, "output": out}) + "\n")


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


def parity(n):
    return "even" if n % 2 == 0 else "odd"


def planted():
    out = ROOT / "planted"
    out.mkdir(parents=True, exist_ok=True)
    train = [(f"n{n}", parity(n)) for n in range(10, 26)]
    test = [(f"n{n}", parity(n)) for n in range(100, 150)]
    write_jsonl(out / "train.jsonl", train)
    write_jsonl(out / "test.jsonl", test)
    write_json(out / "template.json", TEMPLATE)

    sep = TEMPLATE["separator"]
    group0 = sep.join(render(i, o) for i, o in train[0:4])
    boundary = render(*train[3]) + sep + "Question: " + train[4][0] + "\n"
    noise_markers = [render(*train[4]), render(*train[8]), render(*train[12])]
    flip_digits = set(range(5))

    def label(d, correct):
        return " even" if (d % 2 == 0) == correct else " odd"

    rules = []
    for d in range(10):
        suffix = f"{d}\nAnswer:"
        gold, wrong = label(d, True), label(d, False)
        noisy = d in flip_digits
        noise = {wrong: -0.06, gold: -3.0} if noisy else {gold: -0.06, wrong: -3.0}
        # Full-pool prompt: degraded like a noise group.
        rules.append({"suffix": suffix, "contains": boundary, "logits": noise})
        for m in noise_markers:
            rules.append({"suffix": suffix, "contains": m, "logits": noise})
        rules.append({"suffix": suffix, "contains": group0, "logits": {gold: -0.01, wrong: -6.0}})
        rules.append({"suffix": suffix, "logits": {" even": -0.7, " odd": -0.7}})
    table = {"model_id": "planted-parity", "top_k": 20,
             "default": {"\n": -0.05, " even": -4.0, " odd": -4.0},
             "rules": rules}
    write_json(ROOT / "planted_table.json", table)


def uniform():
    out = ROOT / "uniform"
    out.mkdir(parents=True, exist_ok=True)
    # Long, equal-length labels keep the rendered demo much longer than the
    # bare query, so prompt length is dominated by the demonstrations.
    labels = [f"{name} category label padded out to one fixed width" for name in ("alpha", "bravo", "delta", "gamma")]
    train = [(f"record {n:03d} with a fixed-width payload of text", labels[n % 4]) for n in range(32)]
    test = [(f"record {n:03d} with a fixed-width payload of text", labels[(n * 7) % 4]) for n in range(100, 120)]
    write_jsonl(out / "train.jsonl", train)
    write_jsonl(out / "test.jsonl", test)
    write_json(out / "template.json", TEMPLATE)

    rules = []
    for inp, gold in test + train:
        logits = {" " + l: -4.0 for l in labels}
        logits[" " + gold] = -0.02
        rules.append({"suffix": f"Question: {inp}\nAnswer:", "logits": logits})
    table = {"model_id": "uniform-oracle", "top_k": 20,
             "default": {"\n": -0.01, " " + labels[0]: -5.0},
             "rules": rules}
    write_json(ROOT / "uniform_table.json", table)


if __name__ == "__main__":
    planted()
    uniform()
