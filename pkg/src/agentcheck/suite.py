"""Suite configuration, fixture writing and (parallel) suite execution."""

from __future__ import annotations

import json
import os
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .llm import HttpProvider, PricingTable, Provider, ScriptedProvider
from .pipeline import Outcome, RunConfig, RunRecord, run_test
from .spec_model import AgentSpecification, FeatureDescription, canonical_json
from .subjects import AgentKind, BehaviorScript, BugBehavior, MockAgentAdapter
from .testenv import HOME, Environment, FaultSpec

ENV_PREFIX = "SPECOPS_"

EXIT_PASS = 0
EXIT_FRAMEWORK_ERROR = 1
EXIT_USAGE = 2
EXIT_BUGS = 10
EXIT_ENV_FAILURE = 20

OUTCOME_EXIT = {Outcome.PASS: EXIT_PASS, Outcome.BUGS: EXIT_BUGS, Outcome.ENVIRONMENT_FAILURE: EXIT_ENV_FAILURE}


class ConfigError(ValueError):
    """Invalid or inconsistent suite configuration (a usage error)."""


def exit_code(record: Optional[RunRecord]) -> int:
    """0/10/20 from the verdict outcome; anything without a verdict is a framework error."""
    if record is None or record.verdict is None:
        return EXIT_FRAMEWORK_ERROR
    return OUTCOME_EXIT[record.verdict.outcome]


@dataclass(frozen=True)
class AgentEntry:
    spec: AgentSpecification
    adapter: AgentKind
    behavior: BehaviorScript
    cwd: str = HOME


@dataclass(frozen=True)
class FeatureEntry:
    feature: FeatureDescription
    agent: str
    bugs: Optional[tuple[BugBehavior, ...]] = None  # None keeps the behavior file's own bug list
    faults: tuple[FaultSpec, ...] = ()
    behavior: Optional[BehaviorScript] = None  # overrides the agent's script for this feature


@dataclass
class SuiteConfig:
    provider: dict
    features: list[FeatureEntry]
    agents: dict[str, AgentEntry]
    base_dir: Path
    seed: int = 0
    max_retries: int = 3
    out: Path = Path("runs")
    pricing: Optional[PricingTable] = None
    jobs: int = 1
    transcript: Optional[Path] = None  # single-run override

    @classmethod
    def load(cls, path: Path | str, *, environ: Mapping[str, str] = os.environ) -> SuiteConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        base = path.parent
        raw = apply_env_overrides(raw, environ)

        def rel(p: str) -> Path:
            q = Path(p)
            return q if q.is_absolute() else base / q

        agents = {}
        for name, a in (raw.get("agents") or {}).items():
            spec_raw = a["spec"] if isinstance(a["spec"], dict) else json.loads(rel(a["spec"]).read_text())
            beh_raw = a.get("behavior") or {}
            beh = BehaviorScript.from_dict(beh_raw) if isinstance(beh_raw, dict) else BehaviorScript.from_file(rel(beh_raw))
            agents[name] = AgentEntry(AgentSpecification.from_dict(spec_raw), AgentKind(a.get("adapter", "MockCli")),
                                      beh, a.get("cwd", HOME))
        feats_ref = raw.get("features")
        if feats_ref is None:
            raise ConfigError("config has no features file")
        try:
            feats_raw = feats_ref if isinstance(feats_ref, list) else json.loads(rel(feats_ref).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read features file: {e}") from e
        fault_map = raw.get("faults") or {}
        features = []
        for f in feats_raw:
            fd = FeatureDescription.from_dict(f["feature"])
            if f["agent"] not in agents:
                raise ConfigError(f"feature {fd.id} names unknown agent {f['agent']!r}")
            bugs = f.get("bugs")
            faults = tuple(FaultSpec.from_dict(x) for x in f.get("faults", fault_map.get(fd.id, ())))
            beh = f.get("behavior")
            if isinstance(beh, str):
                beh = BehaviorScript.from_file(rel(beh))
            elif isinstance(beh, dict):
                beh = BehaviorScript.from_dict(beh)
            features.append(FeatureEntry(fd, f["agent"], None if bugs is None else tuple(BugBehavior(b) for b in bugs),
                                         faults, beh))
        ids = [f.feature.id for f in features]
        if len(set(ids)) != len(ids):
            raise ConfigError("feature ids must be unique within a suite")
        provider = dict(raw.get("provider") or {"kind": "Scripted"})
        if provider.get("kind", "Scripted") not in ("Scripted", "Http"):
            raise ConfigError(f"unknown provider kind {provider.get('kind')!r}")
        if provider.get("transcript_dir"):
            provider["transcript_dir"] = str(rel(provider["transcript_dir"]))
        pricing = raw.get("pricing")
        return cls(
            provider=provider, features=features, agents=agents, base_dir=base,
            seed=int(raw.get("seed", 0)), max_retries=int(raw.get("max_retries", 3)),
            out=rel(raw.get("out", "runs")),
            pricing=(PricingTable.from_dict(pricing) if isinstance(pricing, dict)
                     else PricingTable.from_file(rel(pricing)) if pricing else None),
            jobs=int(raw.get("jobs", 1)),
            transcript=rel(raw["transcript"]) if raw.get("transcript") else None,
        )

    def feature(self, feature_id: str) -> FeatureEntry:
        for f in self.features:
            if f.feature.id == feature_id:
                return f
        raise KeyError(feature_id)

    def provider_for(self, feature_id: str) -> Provider:
        kind = self.provider.get("kind", "Scripted")
        if kind == "Http":
            key_env = self.provider.get("api_key_env")
            return HttpProvider(self.provider["base_url"], self.provider["model"],
                                os.environ.get(key_env) if key_env else None)
        path = self.transcript
        if path is None:
            tdir = self.provider.get("transcript_dir")
            if not tdir:
                raise ConfigError("the Scripted provider needs a transcript or transcript_dir")
            path = Path(tdir) / f"{feature_id}.json"
        if not Path(path).exists():
            raise ConfigError(f"no transcript for {feature_id}: {path}")
        return ScriptedProvider.from_file(path)

    def run_config(self, entry: FeatureEntry) -> RunConfig:
        agent = self.agents[entry.agent]
        base = entry.behavior or agent.behavior
        script = base if entry.bugs is None else base.with_bugs(entry.bugs)

        def make(session, env, spec):
            return MockAgentAdapter(agent.adapter, script, session, env, entry_points=spec.launch, cwd=agent.cwd)

        return RunConfig(self.provider_for(entry.feature.id), make, max_retries=self.max_retries, faults=entry.faults)


# Environment overrides: SPECOPS_<KEY> replaces the top-level config key.
_OVERRIDES = {"SEED": ("seed", int), "MAX_RETRIES": ("max_retries", int), "OUT": ("out", str),
              "JOBS": ("jobs", int), "TRANSCRIPT": ("transcript", str)}


def apply_env_overrides(raw: dict, environ: Mapping[str, str]) -> dict:
    out = dict(raw)
    for suffix, (key, conv) in _OVERRIDES.items():
        v = environ.get(ENV_PREFIX + suffix)
        if v is not None and v != "":
            try:
                out[key] = conv(v)
            except ValueError as e:
                raise ConfigError(f"{ENV_PREFIX}{suffix}: {e}") from e
    tdir = environ.get(ENV_PREFIX + "TRANSCRIPT_DIR")
    if tdir:
        out["provider"] = {**(out.get("provider") or {}), "transcript_dir": tdir}
    return out


@dataclass
class RunOutcome:
    feature_id: str
    directory: Path
    exit_code: int
    record: Optional[RunRecord] = None
    error: Optional[str] = None


def run_feature(config: SuiteConfig, feature_id: str, out: Optional[Path] = None) -> RunOutcome:
    """Run one feature in a fresh environment and write its run directory.

    Raises KeyError for an unknown feature; framework errors are captured.
    """
    entry = config.feature(feature_id)
    d = Path(out or config.out) / feature_id
    try:
        rc = config.run_config(entry)
        record = run_test(entry.feature, config.agents[entry.agent].spec, Environment(seed=config.seed), rc)
        record.save(d)
        return RunOutcome(feature_id, d, exit_code(record), record)
    except Exception as e:  # noqa: BLE001 - any failure is a framework error for this run
        d.mkdir(parents=True, exist_ok=True)
        (d / "error.txt").write_text(traceback.format_exc())
        return RunOutcome(feature_id, d, EXIT_FRAMEWORK_ERROR, None, f"{type(e).__name__}: {e}")


def run_suite(config: SuiteConfig, *, jobs: Optional[int] = None, out: Optional[Path] = None) -> list[RunOutcome]:
    """Every feature once, each in its own environment; results in feature order."""
    ids = [f.feature.id for f in config.features]
    n = max(1, jobs or config.jobs)
    if n == 1:
        return [run_feature(config, i, out) for i in ids]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(lambda i: run_feature(config, i, out), ids))


def find_run_dirs(paths: Iterable[Path | str]) -> list[Path]:
    """Run directories under the given paths (a path may itself be a run directory)."""
    found = []
    for p in map(Path, paths):
        if (p / "run.json").exists():
            found.append(p)
        elif p.is_dir():
            found += sorted(q.parent for q in p.glob("*/run.json"))
    return found


# -- fixture writing -----------------------------------------------------

@dataclass
class FixtureSuite:
    """What a written fixture suite contains, for callers that want to check against it."""

    config_path: Path
    feature_ids: list[str]
    expected_bugs: dict[str, int] = field(default_factory=dict)


def write_suite(directory: Path | str, scenarios: Iterable, *, pin_digests: bool = True,
                pricing: Optional[dict] = None, out: str = "runs") -> FixtureSuite:
    """Write a runnable suite (config, features, agents, behaviors, transcripts) for scenarios.

    With ``pin_digests`` every scenario is run once so each transcript entry
    carries the digest of the request it answers.
    """
    d = Path(directory)
    for sub in ("transcripts", "agents", "behaviors"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    features, agents, faults = [], {}, {}
    expected = {}
    ids = []
    for sc in scenarios:
        transcript = list(sc.transcript)
        if pin_digests:
            provider = ScriptedProvider(transcript)
            sc.run(provider=provider)
            transcript = provider.pinned_entries()
        (d / "transcripts" / f"{sc.feature.id}.json").write_text(canonical_json(transcript))
        name = sc.agent.name
        behavior = replace(sc.script, bugs=frozenset()).to_dict()
        feat = {"feature": sc.feature.to_dict(), "agent": name, "bugs": sorted(b.value for b in sc.script.bugs)}
        if name not in agents:
            (d / "agents" / f"{name}.json").write_text(canonical_json(sc.agent.to_dict()))
            (d / "behaviors" / f"{name}.json").write_text(canonical_json(behavior))
            agents[name] = {"adapter": sc.agent_kind.value, "spec": f"agents/{name}.json",
                            "behavior": f"behaviors/{name}.json", "cwd": sc.cwd}
        elif json.loads((d / "behaviors" / f"{name}.json").read_text()) != behavior:
            # A scenario-specific script: stored next to the agent's default one.
            (d / "behaviors" / f"{sc.feature.id}.json").write_text(canonical_json(behavior))
            feat["behavior"] = f"behaviors/{sc.feature.id}.json"
        if agents[name]["cwd"] != sc.cwd:
            raise ValueError(f"scenarios disagree on the working directory of {name}")
        features.append(feat)
        if sc.faults:
            faults[sc.feature.id] = [f.to_dict() for f in sc.faults]
        expected[sc.feature.id] = len(sc.script.bugs)
        ids.append(sc.feature.id)
    (d / "features.json").write_text(canonical_json(features))
    (d / "pricing.json").write_text(canonical_json(pricing or {"input_per_million": 3.0, "output_per_million": 15.0}))
    cfg = {"provider": {"kind": "Scripted", "transcript_dir": "transcripts"}, "features": "features.json",
           "agents": agents, "seed": 0, "max_retries": 3, "out": out, "pricing": "pricing.json", "faults": faults}
    (d / "suite.json").write_text(canonical_json(cfg))
    return FixtureSuite(d / "suite.json", ids, expected)
