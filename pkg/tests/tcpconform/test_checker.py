# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

import json
import unittest

from tcpconform.automaton import FlagSet, TcpState, change_state
from tcpconform.checker import (
    ALLOWED_RESULTS,
    ConformanceReport,
    check_api_ordering,
    check_closure_fixpoint,
    check_handlers,
    check_shutdown_regression,
    check_wait_soundness,
    oracle_reachable,
    run_all,
)
from tcpconform.fsm import (
    DEFAULT_HANDLERS,
    CloseWaitHandler,
    EstablishedHandler,
    SegmentEngine,
    TimeWaitHandler,
    default_engine,
    reachable_states,
)
from tcpconform.scenarios import SCENARIOS

S = TcpState


class FinLeavesCloseWait(CloseWaitHandler):
    def __call__(self, socket, segment):
        if segment.flags & FlagSet.FIN and not segment.flags & FlagSet.RST:
            change_state(socket, S.FIN_WAIT_1)
            return socket
        return super().__call__(socket, segment)


class FinClosesEstablished(EstablishedHandler):
    def __call__(self, socket, segment):
        if segment.flags & FlagSet.FIN and not segment.flags & FlagSet.RST:
            change_state(socket, S.CLOSED)
            return socket
        return super().__call__(socket, segment)


class ResetWithoutFlag(EstablishedHandler):
    def __call__(self, socket, segment):
        if segment.flags & FlagSet.RST:
            change_state(socket, S.CLOSED)
            return socket
        return super().__call__(socket, segment)


class CloseWaitTakesData(CloseWaitHandler):
    def __call__(self, socket, segment):
        if self.screen(socket, segment):
            return socket
        self.deliver(socket, segment)
        return socket


class CloseWaitIgnoresReset(CloseWaitHandler):
    def __call__(self, socket, segment):
        return socket


class AnyFinLeavesCloseWait(CloseWaitHandler):
    def __call__(self, socket, segment):
        if segment.flags & FlagSet.FIN:
            change_state(socket, S.FIN_WAIT_1)
            return socket
        return super().__call__(socket, segment)


# one result per state that its handler must never produce
WRONG_TARGETS = {
    S.CLOSED: S.LISTEN,
    S.LISTEN: S.SYN_SENT,
    S.SYN_SENT: S.FIN_WAIT_1,
    S.SYN_RECEIVED: S.FIN_WAIT_1,
    S.ESTABLISHED: S.FIN_WAIT_1,
    S.FIN_WAIT_1: S.ESTABLISHED,
    S.FIN_WAIT_2: S.CLOSING,
    S.CLOSE_WAIT: S.LAST_ACK,
    S.CLOSING: S.FIN_WAIT_2,
    S.LAST_ACK: S.TIME_WAIT,
    S.TIME_WAIT: S.ESTABLISHED,
}


def wrong_target(handler_cls, target):
    """``handler_cls`` moving to ``target`` on every plain ACK."""

    class WrongTarget(handler_cls):
        def __call__(self, socket, segment):
            if segment.flags & FlagSet.ACK and not segment.flags & FlagSet.RST:
                change_state(socket, target)
                return socket
            return super().__call__(socket, segment)

    return WrongTarget()


class TestAllowedResults(unittest.TestCase):
    def test_handlers_agree_with_table(self):
        self.assertEqual(set(ALLOWED_RESULTS), set(TcpState))
        for handler in DEFAULT_HANDLERS:
            with self.subTest(state=handler.state.value):
                self.assertEqual(handler.allowed,
                                 ALLOWED_RESULTS[handler.state])

    def test_widened_handler_still_flagged(self):
        class Widened(EstablishedHandler):
            allowed = EstablishedHandler.allowed | {S.FIN_WAIT_1}

            def __call__(self, socket, segment):
                if segment.flags & FlagSet.FIN:
                    change_state(socket, S.FIN_WAIT_1)
                    return socket
                return super().__call__(socket, segment)

        record = check_handlers(
            default_engine().replace(Widened()))["handlers"]
        self.assertFalse(record.passed)
        self.assertEqual({v.reason for v in record.violations},
                         {"result outside the allowed set"})


class TestCheckHandlers(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.report = check_handlers()

    def test_grid_size(self):
        record = self.report["handlers"]
        self.assertEqual(record.cases, 11 * 32 * 3 * 3 * 3)
        self.assertEqual(record.cases, 9504)

    def test_default_handlers_pass(self):
        self.assertTrue(self.report.passed)
        self.assertEqual(self.report["handlers"].violations, [])

    def test_close_wait_results(self):
        observed = self.report["handlers"].details["observed"]
        self.assertEqual(observed["CLOSE_WAIT"], ["CLOSED", "CLOSE_WAIT"])
        self.assertEqual(observed["CLOSED"], ["CLOSED"])

    def test_close_wait_to_fin_wait_1(self):
        engine = default_engine().replace(FinLeavesCloseWait())
        record = check_handlers(engine)["handlers"]

        self.assertFalse(record.passed)
        fin_only = [f for f in range(32) if f & FlagSet.FIN
                    and not f & FlagSet.RST]
        self.assertEqual(record.flagged_flags(), fin_only)
        self.assertEqual(len(record.violations), len(fin_only) * 27)
        self.assertTrue(all(v.subject == "CLOSE_WAIT"
                            and v.observed == "CLOSE_WAIT -> FIN_WAIT_1"
                            for v in record.violations))

    def test_close_wait_on_any_fin(self):
        engine = default_engine().replace(AnyFinLeavesCloseWait())
        record = check_handlers(engine)["handlers"]

        any_fin = [f for f in range(32) if f & FlagSet.FIN]
        self.assertEqual(len(any_fin), 16)
        self.assertEqual(record.flagged_flags(), any_fin)
        self.assertEqual(len(record.violations), 16 * 27)
        self.assertEqual({v.subject for v in record.violations},
                         {"CLOSE_WAIT"})

    def test_wrong_target_catalog(self):
        self.assertEqual(len(WRONG_TARGETS), len(DEFAULT_HANDLERS))
        plain_ack = [f for f in range(32) if f & FlagSet.ACK
                     and not f & FlagSet.RST]
        for handler_cls in DEFAULT_HANDLERS:
            state = handler_cls.state
            target = WRONG_TARGETS[state]
            self.assertNotIn(target, ALLOWED_RESULTS[state])
            with self.subTest(state=state.value, target=target.value):
                engine = default_engine().replace(
                    wrong_target(handler_cls, target))
                record = check_handlers(engine)["handlers"]
                self.assertFalse(record.passed)
                self.assertEqual({v.subject for v in record.violations},
                                 {state.value})
                self.assertEqual(record.flagged_flags(), plain_ack)
                self.assertEqual(
                    {v.observed for v in record.violations},
                    {f"{state.value} -> {target.value}"})

    def test_close_without_reset(self):
        engine = default_engine().replace(FinClosesEstablished())
        record = check_handlers(engine)["handlers"]
        self.assertFalse(record.passed)
        self.assertEqual({v.reason for v in record.violations},
                         {"closed without a reset"})

    def test_reset_without_flag(self):
        engine = default_engine().replace(ResetWithoutFlag())
        record = check_handlers(engine)["handlers"]
        self.assertEqual({v.reason for v in record.violations},
                         {"reset flag not set"})
        self.assertEqual(record.flagged_flags(),
                         [f for f in range(32) if f & FlagSet.RST])

    def test_close_wait_model_change(self):
        engine = default_engine().replace(CloseWaitTakesData())
        record = check_handlers(engine)["handlers"]
        self.assertFalse(record.passed)
        self.assertTrue(all(v.reason.startswith("socket model changed")
                            for v in record.violations))

    def test_missing_handler(self):
        engine = SegmentEngine(h() for h in DEFAULT_HANDLERS
                               if h is not TimeWaitHandler)
        with self.assertLogs("tcpconform.fsm", level="WARNING"):
            record = check_handlers(engine)["handlers"]
        self.assertFalse(record.passed)
        self.assertEqual({v.subject for v in record.violations},
                         {"TIME_WAIT"})


class TestCheckClosureFixpoint(unittest.TestCase):
    def test_default_engine(self):
        report = check_closure_fixpoint()
        record = report["closure"]
        self.assertTrue(report.passed)
        self.assertEqual(record.cases, 11)
        self.assertEqual(
            record.details["new_states_per_depth"]["LISTEN"],
            [["SYN_RECEIVED"], ["CLOSED", "ESTABLISHED"], ["CLOSE_WAIT"], []],
        )

    def test_oracle_matches_engine(self):
        for state in TcpState:
            self.assertEqual(oracle_reachable(state), reachable_states(state))

    def test_detects_ignored_reset(self):
        engine = default_engine().replace(CloseWaitIgnoresReset())
        record = check_closure_fixpoint(engine)["closure"]
        self.assertFalse(record.passed)
        self.assertIn("CLOSE_WAIT", {v.subject for v in record.violations})

    def test_deterministic(self):
        self.assertEqual(check_closure_fixpoint().to_json(),
                         check_closure_fixpoint().to_json())


class TestCheckApiOrdering(unittest.TestCase):
    def test_each_dependency(self):
        cases = {
            1: ["connect"],
            2: ["send"],
            3: ["receive"],
            4: ["shutdown"],
            5: ["close"],
            6: ["open", "send"],
            7: ["open", "receive"],
            8: ["open", "shutdown"],
        }
        for dependency, calls in cases.items():
            record = check_api_ordering([calls])["api-ordering"]
            self.assertFalse(record.passed, calls)
            self.assertIn(f"dependency {dependency}",
                          {v.reason for v in record.violations})

    def test_failed_connect_does_not_count(self):
        calls = ["open", ("connect", "ERROR_TIMEOUT"), "send"]
        record = check_api_ordering([calls])["api-ordering"]
        self.assertEqual([v.reason for v in record.violations],
                         ["dependency 6"])

    def test_valid_sequences(self):
        report = check_api_ordering([
            ["open", "connect", "send", "receive", "shutdown", "close"],
            ["open", "accept", "receive", "close"],
            ["open", "close"],
        ])
        self.assertTrue(report.passed)
        self.assertEqual(report["api-ordering"].cases, 3)

    def test_scenario_traces_pass(self):
        traces = [s.run(seed=seed).result.trace
                  for s in SCENARIOS.values() for seed in range(3)]
        report = check_api_ordering(traces)
        self.assertTrue(report.passed)
        self.assertGreater(report["api-ordering"].cases, 0)


class TestCheckShutdownRegression(unittest.TestCase):
    def test_fixed(self):
        record = check_shutdown_regression(seeds=20)["shutdown-regression"]
        self.assertTrue(record.passed)
        self.assertEqual(record.cases, 20)

    def test_buggy(self):
        record = check_shutdown_regression(buggy=True,
                                           seeds=20)["shutdown-regression"]
        self.assertFalse(record.passed)
        self.assertTrue(record.details["known_defect_seen"])

    def test_full_seed_range(self):
        fixed = check_shutdown_regression(seeds=1000)["shutdown-regression"]
        self.assertTrue(fixed.passed)
        self.assertEqual(fixed.cases, 1000)
        buggy = check_shutdown_regression(buggy=True,
                                          seeds=1000)["shutdown-regression"]
        self.assertFalse(buggy.passed)
        self.assertTrue(buggy.details["known_defect_seen"])


class TestCheckWaitSoundness(unittest.TestCase):
    def test_runs_clean(self):
        record = check_wait_soundness(seeds=16)["wait-soundness"]
        self.assertTrue(record.passed)
        self.assertEqual(record.cases, 16)
        self.assertGreater(record.details["completed_waits"], 0)

    def test_full_seed_range(self):
        record = check_wait_soundness(1000)["wait-soundness"]
        self.assertTrue(record.passed)
        self.assertEqual(record.cases, 1000)


class TestReport(unittest.TestCase):
    def test_run_all_selection(self):
        report = run_all(checks=["closure"])
        self.assertEqual([c.check for c in report.checks], ["closure"])
        self.assertEqual(report.checks[0].cases, 11)

    def test_unknown_check(self):
        with self.assertRaises(ValueError):
            run_all(checks=["nope"])

    def test_json_and_table(self):
        report = run_all(checks=["closure", "api-ordering"])
        data = json.loads(report.to_json())
        self.assertTrue(data["passed"])
        self.assertEqual([c["check"] for c in data["checks"]],
                         ["closure", "api-ordering"])
        table = report.to_table()
        self.assertIn("closure", table)
        self.assertTrue(table.rstrip().endswith("PASS"))

    def test_merge(self):
        failing = check_handlers(
            default_engine().replace(FinLeavesCloseWait()))
        report = check_closure_fixpoint().merge(failing)
        self.assertIsInstance(report, ConformanceReport)
        self.assertFalse(report.passed)
        self.assertIn("FAIL", report.to_table())


if __name__ == "__main__":
    unittest.main()
