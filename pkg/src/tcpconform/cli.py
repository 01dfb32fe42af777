# Copyright (C) 2024 The tcpconform authors
# SPDX-License-Identifier: BSD-3-Clause
# See: https://spdx.org/licenses/

"""Command-line front end.

    tcpconform scenario handshake --seed 7 --out handshake.jsonl
    tcpconform scenario shutdown-race --buggy
    tcpconform conformance --check closure
    tcpconform dump-automaton --format jsonl
"""

import logging
import os
import sys
import typing as ty

import fire
import pandas as pd

from tcpconform.automaton import transition_table
from tcpconform.checker import CHECKS, run_all
from tcpconform.config import CliConfig, HarnessConfig, TimerConfig, \
    resolve_seed
from tcpconform.errors import HarnessDeadlock, ScriptError
from tcpconform.harness import run_pair
from tcpconform.scenarios import SCENARIOS, get_scenario
from tcpconform.script import ScriptRunner, parse_script
from tcpconform.trace import ScenarioTrace

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

FORMATS = ("jsonl", "table")


def _fail(message: str, code: int = EXIT_CONFIG):
    print(f"tcpconform: {message}", file=sys.stderr)
    raise SystemExit(code)


def _setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _checks(check: ty.Any) -> ty.Optional[ty.List[str]]:
    # fire turns "a,b" into a tuple
    if check is None:
        return None
    if isinstance(check, str):
        check = check.split(",")
    names = [str(c).strip() for c in check if str(c).strip()]
    unknown = [c for c in names if c not in CHECKS]
    if unknown:
        _fail(f"unknown check(s) {', '.join(unknown)}; expected one of "
              f"{', '.join(CHECKS)}")
    return names


def build_config(subcommand: str, target: ty.Optional[str] = None,
                 seed: ty.Any = None, msl: ty.Optional[int] = None,
                 timeout: ty.Optional[int] = None, buggy: bool = False,
                 out: ty.Optional[str] = None,
                 format: ty.Optional[str] = None,
                 check: ty.Optional[str] = None) -> CliConfig:
    """Collect the flags of one invocation; exits with code 2 on bad input."""
    if format is not None and format not in FORMATS:
        _fail(f"format must be one of {', '.join(FORMATS)}, got {format!r}")
    try:
        timers = TimerConfig() if msl is None else TimerConfig(msl=msl)
        harness = HarnessConfig(buggy_shutdown=bool(buggy)) \
            if timeout is None else HarnessConfig(socket_timeout=timeout,
                                                  buggy_shutdown=bool(buggy))
        return CliConfig(subcommand=subcommand, target=target,
                         seed=resolve_seed(seed), timers=timers,
                         harness=harness, buggy_mode=bool(buggy), output=out,
                         format=format, check=check)
    except ValueError as exc:
        _fail(str(exc))


def _emit(text: str, out: ty.Optional[str]):
    if out is None:
        sys.stdout.write(text)
        return
    with open(out, "w", encoding="utf-8") as f:
        f.write(text)
    log.info("wrote %s", out)


def _trace_text(trace: ScenarioTrace, format: str) -> str:
    if format == "jsonl":
        return trace.to_jsonl()
    frame = pd.DataFrame([r.model_dump(by_alias=True) for r in trace],
                         columns=["t", "ep", "kind", "from", "to", "flags",
                                  "detail"])
    frame["kind"] = frame["kind"].map(lambda k: getattr(k, "value", k))
    return frame.to_string(index=False) + "\n"


class TcpConformCli:
    """Run scenarios and conformance checks of the TCP state machine."""

    def scenario(self, name: str, seed: ty.Any = None, buggy: bool = False,
                 msl: ty.Optional[int] = None,
                 timeout: ty.Optional[int] = None,
                 out: ty.Optional[str] = None, format: str = "jsonl",
                 verbose: bool = False):
        """Run a named scenario or a script file and write its trace.

        Exits 0 when the final states match the expectation and no
        violation was recorded, 1 otherwise, 2 on a configuration error.

        Parameters
        ----------
        name: str
            One of the named scenarios, or the path of a script file with
            ``[a]`` and ``[b]`` sections.
        seed: int
            Scheduler seed; falls back to $TCPCONFORM_SEED, then 0.
        buggy: bool
            Skip the state re-check after the shutdown wait.
        msl: int
            Maximum segment lifetime in virtual time units.
        timeout: int
            Timeout of blocking socket calls.
        out: str
            Trace file; standard output when omitted.
        format: str
            'jsonl' or 'table'.
        verbose: bool
            Log at debug level.
        """
        _setup_logging(verbose)
        config = build_config("scenario", str(name), seed, msl, timeout,
                              buggy, out, format)
        mismatches: ty.List[str] = []
        if config.target not in SCENARIOS and not os.path.isfile(
                config.target):
            _fail(f"unknown scenario {config.target!r}; expected one of "
                  f"{', '.join(SCENARIOS)} or a script file")
        try:
            if config.target in SCENARIOS:
                outcome = get_scenario(config.target).run(
                    seed=config.seed, timers=config.timers,
                    config=config.harness)
                result = outcome.result
                mismatches = outcome.mismatches
            else:
                result = self._run_file(config)
        except HarnessDeadlock as exc:
            _fail(str(exc), EXIT_FAILURE)
        _emit(_trace_text(result.trace, config.format), config.output)
        for v in result.violations:
            print(f"violation: endpoint {v.ep} t={v.t} {v.from_} -> {v.to}: "
                  f"{v.detail.get('message', '')}", file=sys.stderr)
        for mismatch in mismatches:
            print(f"mismatch: {mismatch}", file=sys.stderr)
        if mismatches or result.violations:
            raise SystemExit(EXIT_FAILURE)

    @staticmethod
    def _run_file(config: CliConfig):
        try:
            with open(config.target, encoding="utf-8") as f:
                sections = parse_script(f.read())
        except (OSError, ScriptError) as exc:
            _fail(str(exc))
        missing = [s for s in ("a", "b") if s not in sections]
        if missing:
            _fail(f"{config.target}: missing section(s) "
                  f"{', '.join(f'[{s}]' for s in missing)}")
        return run_pair(ScriptRunner(sections["a"]),
                        ScriptRunner(sections["b"]), timers=config.timers,
                        seed=config.seed, config=config.harness)

    def conformance(self, check: ty.Any = None, buggy: bool = False,
                    seeds: int = 1000, out: ty.Optional[str] = None,
                    format: str = "table", verbose: bool = False):
        """Run the conformance checks; exits 1 on any violation.

        ``check`` selects checks by name (comma separated); 'jsonl'
        writes the report as JSON.
        """
        _setup_logging(verbose)
        config = build_config("conformance", buggy=buggy, out=out,
                              format=format, check=check)
        if not isinstance(seeds, int) or seeds <= 0:
            _fail(f"seeds must be a positive integer, got {seeds!r}")
        report = run_all(buggy=config.buggy_mode, checks=_checks(check),
                         seeds=seeds)
        text = report.to_json() + "\n" if config.format == "jsonl" \
            else report.to_table()
        _emit(text, config.output)
        if not report.passed:
            raise SystemExit(EXIT_FAILURE)

    def dump_automaton(self, format: str = "table",
                       out: ty.Optional[str] = None):
        """Print the transition table, one 'FROM TRIGGER TO' line per
        entry, or one JSON object per entry with --format jsonl."""
        config = build_config("dump-automaton", out=out, format=format)
        table = transition_table()
        if config.format == "jsonl":
            text = pd.DataFrame(table.records()).to_json(orient="records",
                                                         lines=True)
            text = text if text.endswith("\n") else text + "\n"
        else:
            text = table.listing()
        _emit(text, config.output)


def main(argv: ty.Optional[ty.Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    try:
        fire.Fire(TcpConformCli, command=list(argv) if argv is not None
                  else None, name="tcpconform")
    except SystemExit as exc:
        code = exc.code
        if code is None:
            return EXIT_OK
        return code if isinstance(code, int) else EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
