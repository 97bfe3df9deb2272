#!/usr/bin/env python3
"""Regenerate tests/data/codebleu_conformance.jsonl.

Needs the `codebleu` package (0.7.0) with tree-sitter-java and
tree-sitter-python installed. The reference turns name lists into Python sets,
so the hash seed is pinned to 0 to make its dataflow scores reproducible.

    python tools/gen_codebleu_conformance.py > tests/data/codebleu_conformance.jsonl
"""

import json
import os
import sys

if os.environ.get("PYTHONHASHSEED") != "0":
    os.environ["PYTHONHASHSEED"] = "0"
    os.execv(sys.executable, [sys.executable] + sys.argv)

from codebleu import calc_codebleu  # noqa: E402

JAVA = [
    (
        "public int caughtSpeeding(int speed, boolean isBirthday) {\n"
        "    int bonus = isBirthday ? 5 : 0;\n"
        "    if (speed <= 60 + bonus) {\n"
        "        return 0;\n"
        "    } else if (speed <= 80 + bonus) {\n"
        "        return 1;\n"
        "    }\n"
        "    return 2;\n"
        "}",
        "public int caughtSpeeding(int speed, boolean isBirthday) {\n"
        "    if (isBirthday) {\n"
        "        speed = speed - 5;\n"
        "    }\n"
        "    if (speed < 60) {\n"
        "        return 0;\n"
        "    } else if (speed < 80) {\n"
        "        return 1;\n"
        "    }\n"
        "    return 2;\n"
        "}",
    ),
    (
        "public int sum(int[] nums) {\n    int total = 0;\n    for (int i = 0; i < nums.length; i++) {\n"
        "        total += nums[i];\n    }\n    return total;\n}",
        "public int sum(int[] nums) {\n    int total = 0;\n    for (int i = 0; i <= nums.length; i++) {\n"
        "        total = nums[i];\n    }\n    return total;\n}",
    ),
    (
        "public boolean sleepIn(boolean weekday, boolean vacation) {\n    return !weekday || vacation;\n}",
        "public boolean sleepIn(boolean weekday, boolean vacation) {\n    if (weekday) {\n"
        "        return false;\n    }\n    return true;\n}",
    ),
    (
        "public String reverse(String s) {\n    String out = \"\";\n    for (int i = s.length() - 1; i >= 0; i--) {\n"
        "        out = out + s.charAt(i);\n    }\n    return out;\n}",
        "public String reverse(String s) {\n    String out = \"\";\n    for (int i = s.length(); i > 0; i--) {\n"
        "        out += s.charAt(i);\n    }\n    return out;\n}",
    ),
    (
        "public int countEvens(int[] nums) {\n    int count = 0;\n    for (int n : nums) {\n"
        "        if (n % 2 == 0) {\n            count++;\n        }\n    }\n    return count;\n}",
        "public int countEvens(int[] nums) {\n    int count = 0;\n    for (int n : nums) {\n"
        "        if (n % 2 == 1) {\n            count++;\n        }\n    }\n    return count;\n}",
    ),
    (
        "public int max(int a, int b, int c) {\n    int m = a;\n    if (b > m) m = b;\n    if (c > m) m = c;\n"
        "    return m;\n}",
        "public int max(int a, int b, int c) {\n    if (a > b && a > c) return a;\n    if (b > c) return b;\n"
        "    return c;\n}",
    ),
    (
        "public boolean isPalindrome(String s) {\n    int i = 0, j = s.length() - 1;\n    while (i < j) {\n"
        "        if (s.charAt(i) != s.charAt(j)) return false;\n        i++;\n        j--;\n    }\n"
        "    return true;\n}",
        "public boolean isPalindrome(String s) {\n    int i = 0;\n    int j = s.length();\n    while (i < j) {\n"
        "        if (s.charAt(i) != s.charAt(j)) {\n            return false;\n        }\n        i++;\n    }\n"
        "    return true;\n}",
    ),
    (
        "public int factorial(int n) {\n    int result = 1;\n    for (int k = 2; k <= n; k++) {\n"
        "        result *= k;\n    }\n    return result;\n}",
        "public int factorial(int n) {\n    if (n == 0) return 1;\n    return n * factorial(n - 1);\n}",
    ),
    (
        "public String fizzString(String str) {\n    boolean f = str.startsWith(\"f\");\n"
        "    boolean b = str.endsWith(\"b\");\n    if (f && b) return \"FizzBuzz\";\n    if (f) return \"Fizz\";\n"
        "    if (b) return \"Buzz\";\n    return str;\n}",
        "public String fizzString(String str) {\n    if (str.startsWith(\"f\")) return \"Fizz\";\n"
        "    if (str.endsWith(\"b\")) return \"Buzz\";\n    return str;\n}",
    ),
    (
        "public int[] doubled(int[] a) {\n    int[] out = new int[a.length];\n"
        "    for (int i = 0; i < a.length; i++) {\n        out[i] = a[i] * 2;\n    }\n    return out;\n}",
        "public int[] doubled(int[] a) {\n    for (int i = 0; i < a.length; i++) {\n        a[i] = a[i] * 2;\n"
        "    }\n    return a;\n}",
    ),
    (
        "public boolean in1To10(int n, boolean outsideMode) {\n    if (outsideMode) {\n"
        "        return n <= 1 || n >= 10;\n    }\n    return n >= 1 && n <= 10;\n}",
        "public boolean in1To10(int n, boolean outsideMode) {\n    if (outsideMode) {\n"
        "        return n < 1 || n > 10;\n    }\n    return n >= 1 && n <= 10;\n}",
    ),
    (
        "public int sumDigits(int n) {\n    int s = 0;\n    while (n > 0) {\n        s += n % 10;\n"
        "        n /= 10;\n    }\n    return s;\n}",
        "public int sumDigits(int n) {\n    int s = 0;\n    while (n > 0) {\n        s += n % 10;\n    }\n"
        "    return s;\n}",
    ),
    (
        "public String makeTags(String tag, String word) {\n"
        "    return \"<\" + tag + \">\" + word + \"</\" + tag + \">\";\n}",
        "public String makeTags(String tag, String word) {\n    String open = \"<\" + tag + \">\";\n"
        "    String close = \"<\" + tag + \">\";\n    return open + word + close;\n}",
    ),
    (
        "public int countHi(String str) {\n    int count = 0;\n    for (int i = 0; i < str.length() - 1; i++) {\n"
        "        if (str.substring(i, i + 2).equals(\"hi\")) {\n            count++;\n        }\n    }\n"
        "    return count;\n}",
        "public int countHi(String str) {\n    int count = 0;\n    for (int i = 0; i < str.length(); i++) {\n"
        "        if (str.substring(i, i + 2) == \"hi\") {\n            count = count + 1;\n        }\n    }\n"
        "    return count;\n}",
    ),
    (
        "public boolean has22(int[] nums) {\n    for (int i = 0; i + 1 < nums.length; i++) {\n"
        "        if (nums[i] == 2 && nums[i + 1] == 2) return true;\n    }\n    return false;\n}",
        "public boolean has22(int[] nums) {\n    boolean found = false;\n"
        "    for (int i = 0; i < nums.length; i++) {\n        if (nums[i] == 2) {\n            found = true;\n"
        "        }\n    }\n    return found;\n}",
    ),
    (
        "public double average(int[] xs) {\n    double total = 0;\n    for (int x : xs) total += x;\n"
        "    return total / xs.length;\n}",
        "public double average(int[] xs) {\n    int total = 0;\n    for (int x : xs) total += x;\n"
        "    return total / xs.length;\n}",
    ),
    (
        "public int lastDigit(int a, int b) {\n    // compare last digits\n    return a % 10 == b % 10 ? 1 : 0;\n}",
        "public int lastDigit(int a, int b) {\n    /* compare */\n    int x = a % 10;\n    int y = b % 10;\n"
        "    if (x == y) return 1;\n    return 0;\n}",
    ),
    (
        "public int gcd(int a, int b) {\n    while (b != 0) {\n        int t = b;\n        b = a % b;\n"
        "        a = t;\n    }\n    return a;\n}",
        "public int gcd(int a, int b) {\n    while (b != 0) {\n        b = a % b;\n        a = b;\n    }\n"
        "    return a;\n}",
    ),
    (
        "public String repeatEnd(String str, int n) {\n    String end = str.substring(str.length() - n);\n"
        "    String res = \"\";\n    for (int i = 0; i < n; i++) res += end;\n    return res;\n}",
        "public String repeatEnd(String str, int n) {\n    String res = \"\";\n"
        "    for (int i = 0; i < n; i++) {\n        res = res + str.substring(str.length() - n);\n    }\n"
        "    return res;\n}",
    ),
    (
        "public int[] swapEnds(int[] nums) {\n    int tmp = nums[0];\n    nums[0] = nums[nums.length - 1];\n"
        "    nums[nums.length - 1] = tmp;\n    return nums;\n}",
        "public int[] swapEnds(int[] nums) {\n    nums[0] = nums[nums.length - 1];\n"
        "    nums[nums.length - 1] = nums[0];\n    return nums;\n}",
    ),
    ("int x = 1;", "int y = x + 1; y = y * 2;"),
]

PYTHON = [
    (
        "def caught_speeding(speed, is_birthday):\n    if is_birthday:\n        speed -= 5\n"
        "    if speed <= 60:\n        return 0\n    elif speed <= 80:\n        return 1\n    return 2",
        "def caught_speeding(speed, is_birthday):\n    bonus = 5 if is_birthday else 0\n"
        "    if speed < 60 + bonus:\n        return 0\n    if speed < 80 + bonus:\n        return 1\n    return 2",
    ),
    (
        "def total(nums):\n    s = 0\n    for n in nums:\n        s += n\n    return s",
        "def total(nums):\n    s = 0\n    for n in nums:\n        s = n\n    return s",
    ),
    (
        "def count_evens(nums):\n    return len([n for n in nums if n % 2 == 0])",
        "def count_evens(nums):\n    count = 0\n    for n in nums:\n        if n % 2 == 0:\n            count += 1\n"
        "    return count",
    ),
    (
        "def reverse(s):\n    out = ''\n    for ch in s:\n        out = ch + out\n    return out",
        "def reverse(s):\n    return s[::-1]",
    ),
    (
        "def is_palindrome(s):\n    i, j = 0, len(s) - 1\n    while i < j:\n        if s[i] != s[j]:\n"
        "            return False\n        i += 1\n        j -= 1\n    return True",
        "def is_palindrome(s):\n    i = 0\n    j = len(s)\n    while i < j:\n        if s[i] != s[j]:\n"
        "            return False\n        i += 1\n    return True",
    ),
    (
        "def factorial(n):\n    result = 1\n    for k in range(2, n + 1):\n        result *= k\n    return result",
        "def factorial(n):\n    result = 0\n    for k in range(1, n):\n        result *= k\n    return result",
    ),
    (
        "def fizz_string(s):\n    \"\"\"Fizz or Buzz.\"\"\"\n    f = s.startswith('f')\n    b = s.endswith('b')\n"
        "    if f and b:\n        return 'FizzBuzz'\n    if f:\n        return 'Fizz'\n    if b:\n"
        "        return 'Buzz'\n    return s",
        "def fizz_string(s):\n    # prefix first\n    if s.startswith('f'):\n        return 'Fizz'\n"
        "    if s.endswith('b'):\n        return 'Buzz'\n    return s",
    ),
    (
        "def gcd(a, b):\n    while b:\n        a, b = b, a % b\n    return a",
        "def gcd(a, b):\n    while b != 0:\n        t = b\n        b = a % b\n        a = t\n    return a",
    ),
    (
        "def sum_digits(n):\n    s = 0\n    while n > 0:\n        s += n % 10\n        n //= 10\n    return s",
        "def sum_digits(n):\n    return sum(int(d) for d in str(n))",
    ),
    (
        "def make_tags(tag, word):\n    return '<' + tag + '>' + word + '</' + tag + '>'",
        "def make_tags(tag, word):\n    return f'<{tag}>{word}<{tag}>'",
    ),
    (
        "def has22(nums):\n    for i in range(len(nums) - 1):\n        if nums[i] == 2 and nums[i + 1] == 2:\n"
        "            return True\n    return False",
        "def has22(nums):\n    for i in range(len(nums)):\n        if nums[i] == 2 and nums[i + 1] == 2:\n"
        "            return True\n        else:\n            return False",
    ),
    (
        "def average(xs):\n    total = 0\n    for x in xs:\n        total += x\n    return total / len(xs)",
        "def average(xs):\n    total = 0\n    for x in xs:\n        total += x\n    return total // len(xs)",
    ),
    (
        "def count_hi(s):\n    count = 0\n    for i in range(len(s) - 1):\n        if s[i:i + 2] == 'hi':\n"
        "            count += 1\n    return count",
        "def count_hi(s):\n    return s.count('hi')",
    ),
    (
        "def max3(a, b, c):\n    m = a\n    if b > m:\n        m = b\n    if c > m:\n        m = c\n    return m",
        "def max3(a, b, c):\n    if a > b and a > c:\n        return a\n    elif b > c:\n        return b\n"
        "    else:\n        return c",
    ),
    (
        "def doubled(a):\n    out = []\n    for x in a:\n        out.append(x * 2)\n    return out",
        "def doubled(a):\n    for i in range(len(a)):\n        a[i] = a[i] * 2\n    return a",
    ),
    (
        "def swap_ends(nums):\n    nums[0], nums[-1] = nums[-1], nums[0]\n    return nums",
        "def swap_ends(nums):\n    nums[0] = nums[-1]\n    nums[-1] = nums[0]\n    return nums",
    ),
    (
        "def word_lengths(words, minimum=1):\n    lengths = {}\n    for w in words:\n"
        "        if len(w) >= minimum:\n            lengths[w] = len(w)\n    return lengths",
        "def word_lengths(words, minimum=1):\n    return {w: len(w) for w in words if len(w) > minimum}",
    ),
    (
        "def first_last6(nums):\n    return nums[0] == 6 or nums[-1] == 6",
        "def first_last6(nums):\n    if nums[0] == 6:\n        return True\n    return nums[len(nums)] == 6",
    ),
    ("x = 1", "y = x + 1\ny = y * 2"),
]

# Identity pairs: a snippet scored against itself.
IDENTITY = [
    ("java", JAVA[1][0]),
    ("java", JAVA[6][0]),
    ("java", JAVA[17][0]),
    ("python", PYTHON[0][0]),
    ("python", PYTHON[4][0]),
    ("python", PYTHON[7][0]),
]


def score(hyp, ref, lang):
    r = calc_codebleu([ref], [hyp], lang=lang)
    return {
        "hyp": hyp,
        "ref": ref,
        "language": lang,
        "identity": hyp == ref,
        "expected": {
            "combined": r["codebleu"],
            "ngram": r["ngram_match_score"],
            "weighted_ngram": r["weighted_ngram_match_score"],
            "syntax": r["syntax_match_score"],
            "dataflow": r["dataflow_match_score"],
        },
    }


def main():
    rows = [score(h, r, "java") for r, h in JAVA]
    rows += [score(h, r, "python") for r, h in PYTHON]
    rows += [score(s, s, lang) for lang, s in IDENTITY]
    rows += [score(r, h, "java") for r, h in JAVA[:3]]  # swapped direction
    rows += [score(r, h, "python") for r, h in PYTHON[:1]]
    assert len(rows) == 50, len(rows)
    for row in rows:
        print(json.dumps(row, ensure_ascii=False))


if __name__ == "__main__":
    main()
