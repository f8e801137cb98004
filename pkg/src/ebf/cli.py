"""Command-line front end.

Exit codes are a stable scripting contract: 0 completed with zero
findings, 1 completed with at least one finding, 2 usage or configuration
error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, replace

from . import mqtt_codec as mc
from . import orchestrator as orch
from . import secure_channel as sc
from . import target_suite as ts
from .corpus import load_corpus

EXIT_CLEAN = 0
EXIT_FINDINGS = 1
EXIT_USAGE = 2
EXIT_INTERNAL = 3

KNOWN_TARGETS = ("refbroker",)


class UsageError(ValueError):
    """Bad flags or configuration file."""


class ParseError(UsageError):
    """Configuration file violates the schema."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


@dataclass(frozen=True)
class CliConfig:
    subcommand: str
    campaign: orch.CampaignConfig | None = None
    tcp: bool = False
    report_path: str | None = None
    reproducer: str | None = None
    corpus_dir: str | None = None


def _build_parser() -> _Parser:
    parser = _Parser(prog="ebf", description="bounded exploration + encryption-aware fuzzing")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def campaign_flags(p: _Parser, need_target: bool = True) -> None:
        if need_target:
            p.add_argument("--target", default=None, help="target name (refbroker)")
        p.add_argument("--bugs", default=None, help="comma-separated bug list, e.g. V1,V3")
        p.add_argument("--bmc-depth", type=int, default=None, dest="bmc_depth")
        p.add_argument("--bmc-budget", type=float, default=None, dest="bmc_budget")
        p.add_argument("--fuzz-budget", type=float, default=None, dest="fuzz_budget")
        p.add_argument("--max-execs", type=int, default=None, dest="max_execs")
        p.add_argument("--seed", type=int, default=None, help="campaign RNG seed")
        p.add_argument("--mode", choices=("aware", "blind"), default=None)
        p.add_argument("--tcp", action="store_true", help="serve the broker over localhost TCP")
        p.add_argument("--out", default=None, help="report path (default ebf-out/report.json)")
        p.add_argument("--config", default=None, help="JSON config file")

    campaign_flags(sub.add_parser("run", help="full campaign: bounded exploration then fuzzing"))
    campaign_flags(sub.add_parser("bmc", help="bounded exploration phase only"))

    fuzz = sub.add_parser("fuzz", help="fuzz phase only, seeded from a corpus directory")
    fuzz.add_argument("--corpus", required=True, help="seed corpus directory")
    fuzz.add_argument("--keylog", required=True, help="key log file path")
    campaign_flags(fuzz, need_target=True)

    report = sub.add_parser("report", help="summarize a campaign report")
    report.add_argument("report_file")

    replay = sub.add_parser("replay", help="re-execute a crash reproducer")
    replay.add_argument("reproducer")
    return parser


def load_config(path: str) -> dict:
    """Read config-file overrides; unknown keys are rejected."""
    schema = {
        "target": {"enabled_bugs", "hang_threshold_ms", "max_clients"},
        "bmc": {"depth", "budget_seconds", "packet_len", "max_paths"},
        "fuzz": {"budget_seconds", "max_execs", "rng_seed", "mode"},
        "paths": {"corpus_dir", "keylog_path", "report_path", "crash_dir"},
        "seed_source": None,
        "out_dir": None,
    }
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"config file line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ParseError("config file must hold a JSON object")
    for key, value in raw.items():
        if key not in schema:
            raise ParseError(f"unknown config key {key!r}")
        allowed = schema[key]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            raise ParseError(f"config key {key!r} must hold an object")
        for sub_key in value:
            if sub_key not in allowed:
                raise ParseError(f"unknown config key {key}.{sub_key}")
    return raw


def _merge_campaign_config(args: argparse.Namespace) -> orch.CampaignConfig:
    file_conf: dict = {}
    if getattr(args, "config", None):
        file_conf = load_config(args.config)

    out_dir = file_conf.get("out_dir", "ebf-out")
    paths_conf = dict(file_conf.get("paths", {}))
    paths = orch.CampaignPaths.under(out_dir)
    paths = replace(paths, **paths_conf)
    if getattr(args, "out", None):
        paths = replace(paths, report_path=args.out)
    if getattr(args, "corpus", None):
        paths = replace(paths, corpus_dir=args.corpus)
    if getattr(args, "keylog", None):
        paths = replace(paths, keylog_path=args.keylog)

    target_name = getattr(args, "target", None) or "refbroker"
    if target_name not in KNOWN_TARGETS:
        raise UsageError(f"unknown target {target_name!r} (expected one of {KNOWN_TARGETS})")

    target_conf = dict(file_conf.get("target", {}))
    if args.bugs is not None:
        target_conf["enabled_bugs"] = [b for b in args.bugs.split(",") if b]
    bugs = frozenset(_parse_bug(name) for name in target_conf.pop("enabled_bugs", []))
    try:
        target = ts.TargetConfig(enabled_bugs=bugs, **target_conf)

        bmc_conf = dict(file_conf.get("bmc", {}))
        if args.bmc_depth is not None:
            bmc_conf["depth"] = args.bmc_depth
        if args.bmc_budget is not None:
            bmc_conf["budget_seconds"] = args.bmc_budget
        bmc = orch.BmcPhaseConfig(**bmc_conf)

        fuzz_conf = dict(file_conf.get("fuzz", {}))
        if args.fuzz_budget is not None:
            fuzz_conf["budget_seconds"] = args.fuzz_budget
        if args.max_execs is not None:
            fuzz_conf["max_execs"] = args.max_execs
        if args.seed is not None:
            fuzz_conf["rng_seed"] = args.seed
        if args.mode is not None:
            fuzz_conf["mode"] = args.mode
        fuzz = orch.FuzzPhaseConfig(**fuzz_conf)

        return orch.CampaignConfig(
            target=target,
            paths=paths,
            bmc=bmc,
            fuzz=fuzz,
            seed_source=file_conf.get("seed_source", "bmc"),
            transport="tcp" if getattr(args, "tcp", False) else "memory",
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc)) from exc


def _parse_bug(name: str) -> ts.Bug:
    for bug in ts.Bug:
        if bug.value == name or bug.name == name:
            return bug
    raise ParseError(f"unknown bug {name!r} (expected V1..V4)")


def parse_args(argv: list[str]) -> CliConfig:
    args = _build_parser().parse_args(argv)
    if args.subcommand == "report":
        return CliConfig(subcommand="report", report_path=args.report_file)
    if args.subcommand == "replay":
        return CliConfig(subcommand="replay", reproducer=args.reproducer)
    campaign = _merge_campaign_config(args)
    return CliConfig(
        subcommand=args.subcommand,
        campaign=campaign,
        tcp=bool(getattr(args, "tcp", False)),
        corpus_dir=getattr(args, "corpus", None),
    )


# ---------------------------------------------------------------------------
# Live stats panel.
# ---------------------------------------------------------------------------

def render_stats(stats: orch.FuzzStats) -> str:
    """Fixed-width status panel for one fuzz-phase snapshot."""
    rows = [
        ("run time", f"{stats.elapsed_seconds:,.1f} s", "execs", f"{stats.execs:,}"),
        ("execs/sec", f"{stats.execs_per_sec:,.0f}", "corpus", f"{stats.corpus_size:,}"),
        ("coverage", f"{stats.coverage_buckets:,}", "findings", f"{stats.findings:,}"),
    ]
    body = [
        f"| {left:<9}: {lval:>12} | {right:<8}: {rval:>12} |"
        for left, lval, right, rval in rows
    ]
    width = len(body[0])
    top = "+-- ebf fuzz " + "-" * (width - 14) + "+"
    bottom = "+" + "-" * (width - 2) + "+"
    return "\n".join([top, *body, bottom])


def progress_line(stats: orch.FuzzStats) -> str:
    return (
        f"progress execs={stats.execs} execs_per_sec={stats.execs_per_sec:.0f} "
        f"corpus={stats.corpus_size} coverage={stats.coverage_buckets} "
        f"findings={stats.findings}"
    )


class _StatsPrinter:
    """Panel on a terminal, throttled line records otherwise."""

    def __init__(self, stream=None):
        self.stream = stream if stream is not None else sys.stdout
        self.is_tty = self.stream.isatty()
        self._last = 0.0
        self._drawn_lines = 0

    def __call__(self, stats: orch.FuzzStats) -> None:
        now = time.monotonic()
        if now - self._last < (0.25 if self.is_tty else 1.0):
            return
        self._last = now
        if self.is_tty:
            if self._drawn_lines:
                self.stream.write(f"\x1b[{self._drawn_lines}F")
            panel = render_stats(stats)
            self._drawn_lines = panel.count("\n") + 1
            self.stream.write(panel + "\n")
        else:
            self.stream.write(progress_line(stats) + "\n")
        self.stream.flush()


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------


def _cmd_run(config: CliConfig) -> int:
    assert config.campaign is not None
    report = orch.run_campaign(config.campaign, progress=_StatsPrinter())
    payload = report.to_json()
    _print_summary(payload)
    return EXIT_FINDINGS if payload["findings"] else EXIT_CLEAN


def _cmd_bmc(config: CliConfig) -> int:
    assert config.campaign is not None
    result = orch.run_bmc_phase(config.campaign)
    print(
        f"bmc: {len(result.exploration.paths)} paths"
        f" ({'truncated' if result.exploration.truncated else 'complete'}),"
        f" {len(result.corpus.entries)} seeds -> {config.campaign.paths.corpus_dir}"
    )
    for finding in result.findings:
        print(f"  finding {finding.kind}: {finding.reproducer_file}")
    return EXIT_FINDINGS if result.findings else EXIT_CLEAN


def _cmd_fuzz(config: CliConfig) -> int:
    assert config.campaign is not None and config.corpus_dir is not None
    campaign = config.campaign
    if os.path.exists(campaign.paths.keylog_path):
        os.remove(campaign.paths.keylog_path)
    corpus = load_corpus(config.corpus_dir)
    seeds = orch.convert_seeds(corpus, orch.server_generated_frames(campaign))
    fuzz = orch.run_fuzz_phase_tcp if campaign.transport == "tcp" else orch.run_fuzz_phase
    result = fuzz(campaign, seeds, progress=_StatsPrinter())
    report = orch.CampaignReport(
        config=campaign.echo(),
        bmc_phase={"paths": 0, "truncated": False, "seeds": len(corpus.entries), "findings": []},
        fuzz_phase={
            "execs": result.stats.execs,
            "execs_per_sec": round(result.stats.execs_per_sec, 1),
            "corpus_size": result.stats.corpus_size,
            "coverage_buckets": result.stats.coverage_buckets,
            "rejected_records": result.stats.rejected_records,
            "elapsed_seconds": result.stats.elapsed_seconds,
            "findings": [f.to_json() for f in result.findings],
        },
        findings=tuple(sorted(result.findings, key=lambda f: (f.phase, f.first_seen, f.id))),
    )
    orch.write_report(report, campaign.paths.report_path)
    _print_summary(report.to_json())
    return EXIT_FINDINGS if result.findings else EXIT_CLEAN


def _print_summary(payload: dict) -> None:
    fuzz = payload["fuzz"]
    print(
        f"bmc: {payload['bmc']['paths']} paths, {payload['bmc']['seeds']} seeds, "
        f"{len(payload['bmc']['findings'])} findings"
    )
    print(
        f"fuzz: {fuzz['execs']} execs ({fuzz.get('execs_per_sec', 0):.0f}/s), "
        f"corpus {fuzz['corpus_size']}, coverage {fuzz['coverage_buckets']} buckets, "
        f"{len(fuzz['findings'])} findings"
    )
    for finding in payload["findings"]:
        print(f"  [{finding['phase']}] {finding['kind']} ({finding['prefix']}): {finding['reproducer_file']}")


def _cmd_report(config: CliConfig) -> int:
    assert config.report_path is not None
    payload = orch.load_report(config.report_path)
    print(f"campaign report v{payload['version']}")
    bugs = payload["config"]["target"]["enabled_bugs"]
    print(f"target bugs: {','.join(bugs) if bugs else 'none'}")
    print(f"mode: {payload['config']['fuzz']['mode']}, rng seed {payload['config']['fuzz']['rng_seed']}")
    _print_summary(payload)
    return EXIT_FINDINGS if payload["findings"] else EXIT_CLEAN


def _cmd_replay(config: CliConfig) -> int:
    assert config.reproducer is not None
    with open(config.reproducer, "rb") as fh:
        frame = fh.read()
    sidecar_path = os.path.splitext(config.reproducer)[0] + ".json"
    sidecar = {}
    if os.path.exists(sidecar_path):
        with open(sidecar_path, "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
    bugs = frozenset(_parse_bug(b) for b in sidecar.get("enabled_bugs", []))
    prefix = sidecar.get("session_prefix", orch.PREFIX_NONE)
    broker = ts.Broker(ts.TargetConfig(enabled_bugs=bugs))
    for packet in orch.PREFIX_SCRIPTS.get(prefix, ()):
        broker.handle_frame(mc.encode_packet(packet))
    _, verdict = broker.handle_frame(frame)
    if not verdict.is_anomaly:
        teardown = broker.finish()
        if teardown.is_anomaly:
            verdict = teardown
    if verdict.is_anomaly:
        print(f"reproduced: {orch.verdict_kind_label(verdict)} ({verdict.detail})")
        return EXIT_FINDINGS
    print(f"did not reproduce: verdict {verdict.kind.value}")
    return EXIT_CLEAN


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else argv
    try:
        config = parse_args(argv)
    except UsageError as exc:
        print(f"ebf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if config.subcommand == "run":
            return _cmd_run(config)
        if config.subcommand == "bmc":
            return _cmd_bmc(config)
        if config.subcommand == "fuzz":
            return _cmd_fuzz(config)
        if config.subcommand == "report":
            return _cmd_report(config)
        return _cmd_replay(config)
    except (sc.KeyLogError, orch.ReportError, OSError) as exc:
        print(f"ebf: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
