# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

import io
import json
import os
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from unittest import mock

from tcpconform.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, main
from tcpconform.config import SEED_ENV_VAR
from tcpconform.trace import ScenarioTrace, TraceKind

TUTORIALS = os.path.join(os.path.dirname(__file__), "..", "..", "tutorials",
                         "tcpconform")


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


@mock.patch.dict(os.environ, {SEED_ENV_VAR: ""})
class TestScenarioCommand(unittest.TestCase):
    def test_handshake(self):
        code, out, err = run_cli("scenario", "handshake")
        self.assertEqual(code, EXIT_OK, err)
        trace = ScenarioTrace.from_jsonl(out)
        self.assertEqual(trace.segments_sent(), ["SYN", "SYN+ACK", "ACK"])
        first = json.loads(out.splitlines()[0])
        self.assertEqual(list(first), ["t", "ep", "kind", "from", "to",
                                       "flags", "detail"])

    def test_buggy_race_fails(self):
        code, out, err = run_cli("scenario", "shutdown-race", "--buggy")
        self.assertEqual(code, EXIT_FAILURE)
        self.assertIn("violation", err)
        trace = ScenarioTrace.from_jsonl(out)
        self.assertTrue(trace.filter(TraceKind.VIOLATION))

    def test_fixed_race_passes(self):
        code, _, err = run_cli("scenario", "shutdown-race")
        self.assertEqual(code, EXIT_OK, err)

    def test_same_seed_same_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = [os.path.join(tmp, f"run{i}.jsonl") for i in range(2)]
            for path in paths:
                code, out, _ = run_cli("scenario", "orderly-close", "--seed",
                                       "7", "--out", path)
                self.assertEqual(code, EXIT_OK)
                self.assertEqual(out, "")
            with open(paths[0], "rb") as f0, open(paths[1], "rb") as f1:
                self.assertEqual(f0.read(), f1.read())

    def test_table_format(self):
        code, out, _ = run_cli("scenario", "transfer", "--format", "table")
        self.assertEqual(code, EXIT_OK)
        self.assertIn("StateChange", out)
        self.assertIn("PSH+ACK", out)

    def test_short_msl(self):
        code, out, _ = run_cli("scenario", "orderly-close", "--msl", "5")
        self.assertEqual(code, EXIT_OK)
        trace = ScenarioTrace.from_jsonl(out)
        changes = trace.filter(TraceKind.STATE_CHANGE, "a")
        entered = [r.t for r in changes if r.to == "TIME_WAIT"][0]
        left = [r.t for r in changes if r.from_ == "TIME_WAIT"][0]
        self.assertEqual(left - entered, 10)

    def test_config_errors(self):
        for argv in (
            ("scenario", "no-such-scenario"),
            ("scenario", "handshake", "--seed", "abc"),
            ("scenario", "handshake", "--seed", "-1"),
            ("scenario", "handshake", "--msl", "0"),
            ("scenario", "handshake", "--format", "xml"),
        ):
            code, _, err = run_cli(*argv)
            self.assertEqual(code, EXIT_CONFIG, argv)
            self.assertIn("tcpconform:", err)

    def test_seed_from_environment(self):
        with mock.patch.dict(os.environ, {SEED_ENV_VAR: "7"}):
            _, from_env, _ = run_cli("scenario", "orderly-close")
        _, explicit, _ = run_cli("scenario", "orderly-close", "--seed", "7")
        self.assertEqual(from_env, explicit)

        with mock.patch.dict(os.environ, {SEED_ENV_VAR: "seven"}):
            code, _, _ = run_cli("scenario", "handshake")
        self.assertEqual(code, EXIT_CONFIG)


@mock.patch.dict(os.environ, {SEED_ENV_VAR: ""})
class TestScriptFiles(unittest.TestCase):
    def test_tutorials(self):
        for name in ("handshake.txt", "transfer.txt", "orderly_close.txt",
                     "shutdown_race.txt"):
            path = os.path.abspath(os.path.join(TUTORIALS, name))
            code, out, err = run_cli("scenario", path)
            self.assertEqual(code, EXIT_OK, (name, err))
            self.assertTrue(ScenarioTrace.from_jsonl(out).records)

    def test_buggy_tutorial_race(self):
        path = os.path.abspath(os.path.join(TUTORIALS, "shutdown_race.txt"))
        code, _, err = run_cli("scenario", path, "--buggy")
        self.assertEqual(code, EXIT_FAILURE)
        self.assertIn("violation", err)

    def test_bad_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            bad = os.path.join(tmp, "bad.txt")
            with open(bad, "w") as f:
                f.write("[a]\nopen\nfrobnicate\n[b]\nopen\n")
            half = os.path.join(tmp, "half.txt")
            with open(half, "w") as f:
                f.write("[a]\nopen\nclose\n")
            for path in (bad, half):
                code, _, err = run_cli("scenario", path)
                self.assertEqual(code, EXIT_CONFIG, path)
                self.assertIn("tcpconform:", err)


class TestConformanceCommand(unittest.TestCase):
    def test_closure(self):
        code, out, _ = run_cli("conformance", "--check", "closure")
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(out.rstrip().endswith("PASS"))

    def test_handlers_as_json(self):
        code, out, _ = run_cli("conformance", "--check", "handlers",
                               "--format", "jsonl")
        self.assertEqual(code, EXIT_OK)
        report = json.loads(out)
        self.assertTrue(report["passed"])
        self.assertEqual(report["checks"][0]["cases"], 9504)

    def test_buggy_regression(self):
        code, out, _ = run_cli("conformance", "--check",
                               "shutdown-regression", "--buggy", "--seeds",
                               "20")
        self.assertEqual(code, EXIT_FAILURE)
        self.assertTrue(out.rstrip().endswith("FAIL"))

    def test_bad_arguments(self):
        for argv in (("conformance", "--check", "nope"),
                     ("conformance", "--seeds", "0"),
                     ("conformance", "--format", "csv")):
            code, _, _ = run_cli(*argv)
            self.assertEqual(code, EXIT_CONFIG, argv)


class TestDumpAutomaton(unittest.TestCase):
    def test_listing(self):
        code, out, _ = run_cli("dump-automaton")
        self.assertEqual(code, EXIT_OK)
        lines = out.splitlines()
        self.assertEqual(len(lines), 41)
        self.assertIn("SYN_SENT rcv(SYN+ACK) ESTABLISHED", lines)

    def test_jsonl(self):
        code, out, _ = run_cli("dump-automaton", "--format", "jsonl")
        self.assertEqual(code, EXIT_OK)
        records = [json.loads(line) for line in out.splitlines()]
        self.assertEqual(len(records), 41)
        self.assertEqual(set(records[0]), {"from", "trigger", "to", "origin"})


if __name__ == "__main__":
    unittest.main()
