#!/usr/bin/env python3
"""Writes the bundled toy corpus under data/toy/.

Twenty students with a latent mastery per KC attempt six of ten Java
problems. Each problem is a template with option slots; the first option of
every slot is correct and a student picks it with probability
0.15 + 0.8 * (mean mastery over the problem's KCs). The mock rules label the
wrong options.
"""

import json
import random
import sys
from pathlib import Path

SEED = 20240611
OUT = Path(__file__).resolve().parent.parent / "data" / "toy"

KCS = [
    ("K1", "Conditional logic"),
    ("K2", "Loops and iteration"),
    ("K3", "Arithmetic operators"),
    ("K4", "Returning values"),
]

PROBLEMS = [
    ("P01", "Return 1 if x is zero and 0 otherwise.", ["K1"],
     "public int isZero(int x) {\n    if (x <<0>> 0) {\n        return 1;\n    }<<1>>\n}",
     [["==", "="], [" else {\n        return 0;\n    }", ""]]),
    ("P02", "Return the sum of the integers from 1 to n.", ["K2"],
     "public int sumTo(int n) {\n    int total = 0;\n    for (int i = <<0>>; i <<1>> n; i++) {\n"
     "        total += i;\n    }\n    return total;\n}",
     [["1", "2"], ["<=", "<"]]),
    ("P03", "Return the average of a and b as a double.", ["K3"],
     "public double average(int a, int b) {\n    return <<0>>;\n}",
     [["(a + b) / 2.0", "(a + b) / 2", "a + b / 2"]]),
    ("P04", "Count the even numbers in the array.", ["K2", "K3"],
     "public int countEven(int[] nums) {\n    int count = 0;\n    for (int i = 0; i <<0>> nums.length; i++) {\n"
     "        if (nums[i] <<1>> 2 == 0) {\n            count++;\n        }\n    }\n    return count;\n}",
     [["<", "<="], ["%", "/"]]),
    ("P05", "Return the largest of three integers.", ["K1", "K4"],
     "public int max3(int a, int b, int c) {\n    int m = a;\n    if (b <<0>> m) {\n        m = b;\n    }\n"
     "    if (c <<1>> m) {\n        m = c;\n    }\n    <<2>>\n}",
     [[">", "<"], [">", "<"], ["return m;", "System.out.println(m);"]]),
    ("P06", "Return true if n is even.", ["K3", "K4"],
     "public boolean isEven(int n) {\n    return n <<0>> 2 <<1>> 0;\n}",
     [["%", "/"], ["==", "="]]),
    ("P07", "Return n factorial.", ["K2", "K4"],
     "public int factorial(int n) {\n    int result = <<0>>;\n    for (int i = 1; i <<1>> n; i++) {\n"
     "        result *= i;\n    }\n    return result;\n}",
     [["1", "0"], ["<=", "<"]]),
    ("P08", "Return \"positive\", \"negative\" or \"zero\" for x.", ["K1"],
     "public String sign(int x) {\n    if (x <<0>> 0) {\n        return \"positive\";\n    }\n"
     "    if (x < 0) {\n        return \"negative\";\n    }\n    return \"zero\";\n}",
     [[">", ">="]]),
    ("P09", "Convert a Fahrenheit temperature to Celsius.", ["K3"],
     "public double toCelsius(int f) {\n    return (f - 32) <<0>>;\n}",
     [["* 5.0 / 9", "* 5 / 9", "* (5 / 9)"]]),
    ("P10", "Return the sum of the array elements.", ["K2", "K4"],
     "public int sumArray(int[] nums) {\n    int total = 0;\n    for (int i = 0; i <<0>> nums.length; i++) {\n"
     "        total <<1>> nums[i];\n    }\n    return total;\n}",
     [["<", "<="], ["+=", "="]]),
]

RULES = [
    (r"if \(\w+ = [^=]", "incorrect comparison logic", "Syntax"),
    (r"return [^;]*[^=!<>]= 0;", "confusing assignment with equality", "Syntax"),
    (r"return 1;\n    \}\n\}", "missing return statement", "Syntax"),
    (r"i <= nums\.length", "array index out of bounds", "Runtime"),
    (r"i < n;", "off-by-one error in loop bound", "Logical"),
    (r"int i = 2;", "off by one loop start", "Logical"),
    (r"\(a \+ b\) / 2;", "integer division", "Logical"),
    (r"5 / 9", "integer division truncates result", "Logical"),
    (r"a \+ b / 2", "operator precedence error", "Logical"),
    (r"(\]|\bn) / 2", "using division instead of modulo", "Logical"),
    (r"\((b|c) < m\)", "wrong comparison operator", "Logical"),
    (r"System\.out\.println\(m\)", "printing instead of returning", "Logical"),
    (r"result = 0;", "accumulator initialized to zero", "Logical"),
    (r"x >= 0", "boundary condition error", "Logical"),
    (r"total = nums\[i\]", "overwriting accumulator instead of adding", "Logical"),
]


def render(template, picks):
    code = template
    for i, p in enumerate(picks):
        code = code.replace(f"<<{i}>>", p)
    return code


def main():
    rng = random.Random(SEED)
    problems = {p[0]: p for p in PROBLEMS}
    header = {
        "kcs": [{"id": k, "name": n} for k, n in KCS],
        "problems": [{"id": pid, "statement": st, "language": "Java", "kc_ids": kcs}
                     for pid, st, kcs, _, _ in PROBLEMS],
    }
    lines = [json.dumps(header)]
    for s in range(1, 21):
        sid = f"S{s:02d}"
        mastery = {k: rng.random() for k, _ in KCS}
        attempted = rng.sample(sorted(problems), 6)
        for order, pid in enumerate(attempted):
            _, _, kcs, template, slots = problems[pid]
            m = sum(mastery[k] for k in kcs) / len(kcs)
            picks, correct = [], True
            for opts in slots:
                if rng.random() < 0.15 + 0.8 * m:
                    picks.append(opts[0])
                else:
                    picks.append(rng.choice(opts[1:]))
                    correct = False
            lines.append(json.dumps({"student_id": sid, "problem_id": pid, "order_index": order,
                                     "code": render(template, picks), "correct": int(correct)}))
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "dataset.jsonl").write_text("\n".join(lines) + "\n")

    task = {"language": "java", "context": "mastery_bucket", "buckets": 2,
            "problems": {pid: {"template": t, "slots": sl} for pid, _, _, t, sl in PROBLEMS}}
    (OUT / "toy_task.json").write_text(json.dumps(task, indent=2) + "\n")

    rules = {"rules": [{"pattern": p, "label": l, "category": c} for p, l, c in RULES],
             "embedding_dim": 256, "logprobs": True}
    (OUT / "mock_rules.json").write_text(json.dumps(rules, indent=2) + "\n")

    config = {
        "schema_version": 1,
        "dataset": "dataset.jsonl",
        "out": "out",
        "seed": 7,
        "split": {"folds": 5, "val_ratio": 0.1, "test_ratio": 0.1},
        "levels": ["pair", "problem"],
        "endpoints": {"default": {"url": "http://127.0.0.1:8089/v1", "model": "mock", "retries": 3,
                                  "max_parallel": 4}},
        "clustering": {"k_c": 10, "linkage": "average"},
        "ke": {"d": 8, "lr": 0.05, "epochs": 150, "optimizer": "adam"},
        "generator": "toy",
        "toy_task": "toy_task.json",
        "mock": "mock_rules.json",
        "sft": {"epochs": 50, "lr": 0.5},
        "grpo": {"G": 5, "beta": 0.1, "lr": 0.1, "iterations": 150, "clip_eps": 0.2},
        "eval": {"ks": [1, 5]},
    }
    (OUT / "config.json").write_text(json.dumps(config, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
