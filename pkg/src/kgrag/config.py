"""Engine configuration: a TOML file mapped onto :class:`EngineConfig`.

Example::

    [paths]
    store = "kg.jsonl"          # relative paths resolve against the config file

    [retrieval]
    preset = "default"          # or: weights = [0.7, 0.2, 0.1]
    k = 12

    [linkpred]
    tau = 0.5

    [backend]
    kind = "mock"               # or "http"
    mock_rules = "rules.json"
    http_url = "http://localhost:8000/v1/chat/completions"
    http_model = "gpt-4o"

    [service]
    host = "127.0.0.1"
    port = 8080

Any omitted path falls back to the file bundled with the package.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import KGRAGError
from .engine import DEFAULT_K, Engine
from .genclient import GenerationBackend, HTTPBackend, MockBackend
from .ingest import AliasTable, ExtractionRule, load_aliases, load_rules
from .kg_store import KnowledgeGraph, load_store
from .linkpred import DEFAULT_TAU
from .ontology import Ontology, load_ontology
from .retrieval import Weights
from .verbalizer import TemplateSet, load_templates

WEIGHT_PRESETS: dict[str, Weights] = {
    "default": Weights(0.7, 0.2, 0.1),
    "ontology_heavy": Weights(0.4, 0.4, 0.2),
}
PATH_KEYS = ("ontology", "templates", "aliases", "rules", "store")
BACKENDS = ("mock", "http")


class ConfigError(KGRAGError, ValueError):
    pass


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("kgrag.data").joinpath(name)))


DEMO_STORE = "demo_kg.jsonl"


@dataclass(frozen=True)
class EngineConfig:
    ontology: Path | None = None
    templates: Path | None = None
    aliases: Path | None = None
    rules: Path | None = None
    store: Path | None = None
    weights: Weights = WEIGHT_PRESETS["default"]
    k: int = DEFAULT_K
    tau: float = DEFAULT_TAU
    backend: str = "mock"
    mock_rules: Path | None = None
    http_url: str | None = None
    http_model: str | None = None
    host: str = "127.0.0.1"
    port: int = 8080
    extras: Mapping[str, Any] = field(default_factory=dict, repr=False)

    def validate(self) -> EngineConfig:
        for key in (*PATH_KEYS, "mock_rules"):
            p = getattr(self, key)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{key} path does not exist: {p}")
        try:
            Weights(*self.weights).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie strictly between 0 and 1")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.backend == "http" and not (self.http_url and self.http_model):
            raise ConfigError("http backend needs http_url and http_model")
        if not 0 <= self.port <= 65535:
            raise ConfigError(f"port out of range: {self.port}")
        return self

    def store_path(self) -> Path:
        return Path(self.store) if self.store is not None else bundled_path(DEMO_STORE)

    def with_overrides(self, **changes: Any) -> EngineConfig:
        return replace(self, **{k: v for k, v in changes.items() if v is not None}).validate()


def _weights(section: Mapping[str, Any]) -> Weights:
    if "weights" in section and "preset" in section:
        raise ConfigError("give either retrieval.weights or retrieval.preset, not both")
    if "preset" in section:
        name = section["preset"]
        if name not in WEIGHT_PRESETS:
            raise ConfigError(f"unknown weight preset {name!r}; known: {sorted(WEIGHT_PRESETS)}")
        return WEIGHT_PRESETS[name]
    if "weights" in section:
        w = section["weights"]
        if not isinstance(w, list) or len(w) != 3:
            raise ConfigError("retrieval.weights must be a list of three numbers")
        return Weights(*(float(x) for x in w))
    return WEIGHT_PRESETS["default"]


def config_from_dict(doc: Mapping[str, Any], base_dir: Path | None = None) -> EngineConfig:
    base_dir = base_dir or Path.cwd()

    def path(value: Any) -> Path | None:
        if value is None:
            return None
        p = Path(str(value)).expanduser()
        return p if p.is_absolute() else base_dir / p

    known = {"paths", "retrieval", "linkpred", "backend", "service"}
    paths = doc.get("paths", {})
    retrieval = doc.get("retrieval", {})
    backend = doc.get("backend", {})
    service = doc.get("service", {})
    unknown_paths = set(paths) - set(PATH_KEYS)
    if unknown_paths:
        raise ConfigError(f"unknown [paths] keys: {sorted(unknown_paths)}")
    return EngineConfig(
        **{key: path(paths.get(key)) for key in PATH_KEYS},
        weights=_weights(retrieval),
        k=int(retrieval.get("k", DEFAULT_K)),
        tau=float(doc.get("linkpred", {}).get("tau", DEFAULT_TAU)),
        backend=str(backend.get("kind", "mock")),
        mock_rules=path(backend.get("mock_rules")),
        http_url=backend.get("http_url"),
        http_model=backend.get("http_model"),
        host=str(service.get("host", "127.0.0.1")),
        port=int(service.get("port", 8080)),
        extras={k: v for k, v in doc.items() if k not in known},
    ).validate()


def load_config(path: str | Path | None = None) -> EngineConfig:
    if path is None:
        return EngineConfig().validate()
    p = Path(path)
    try:
        doc = tomllib.loads(p.read_text("utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return config_from_dict(doc, p.parent)


# -- wiring -------------------------------------------------------------------------


@dataclass(frozen=True)
class Resources:
    ontology: Ontology
    templates: TemplateSet
    aliases: AliasTable
    rules: list[ExtractionRule]


def load_resources(cfg: EngineConfig) -> Resources:
    ontology = load_ontology(cfg.ontology)
    return Resources(
        ontology=ontology,
        templates=load_templates(ontology, cfg.templates),
        aliases=load_aliases(ontology, cfg.aliases),
        rules=load_rules(ontology, cfg.rules),
    )


def make_backend(cfg: EngineConfig) -> GenerationBackend:
    if cfg.backend == "http":
        assert cfg.http_url and cfg.http_model
        return HTTPBackend(cfg.http_url, cfg.http_model)
    return MockBackend.from_file(cfg.mock_rules)


def open_store(cfg: EngineConfig, ontology: Ontology) -> KnowledgeGraph:
    return load_store(cfg.store_path(), ontology)


def make_engine(
    cfg: EngineConfig,
    kg: KnowledgeGraph | None = None,
    res: Resources | None = None,
    backend: GenerationBackend | None = None,
) -> Engine:
    res = res or load_resources(cfg)
    kg = kg if kg is not None else open_store(cfg, res.ontology)
    return Engine(
        kg,
        res.templates,
        res.aliases,
        backend or make_backend(cfg),
        weights=cfg.weights,
        k=cfg.k,
    )
