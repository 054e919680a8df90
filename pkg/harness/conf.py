"""
Configuration objects for the harness.

Defaults come from settings.VASA (populated from the environment by
python-decouple), can be overridden by one structured JSON file with
"engine", "vlm", "segmenter" and "bench" sections, and finally by
command-line flags.
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from django.conf import settings

from .choices import OverlayMode, QueryField
from .clients import ChatCompletionsVlm, HttpSegmenter, ScriptBook, load_fixture_oracle
from .exceptions import InvalidConfig


@dataclass(frozen=True)
class EngineConfig:
    """
    Knobs of one inference session.

    Attributes:
        max_rounds (int): Segment-call budget T
        stall_window (int): Rounds W inspected by stall detection
        stall_min_delta (int): Pixel change D at or below which a window counts as stalled
        failure_limit (int): Consecutive failures F tolerated before aborting
        candidate_cap (int): Max candidates kept per segment call
        overlay_alpha (float): Fill opacity of overlays
        outline_width (int): Overlay outline thickness in pixels
        overlay_mode (str): per_candidate or grid
        max_image_side (int): Longest image side sent to the VLM
        max_turns_factor (int): Hard cap on VLM turns, as a multiple of max_rounds
        verify_after_update (bool): Run a scrutiny turn after each mask update
        keep_snapshots (bool): Store full working-mask RLE in every update entry
        time_limit (float): Wall-clock seconds per session (None = unlimited)
        dump_overlays_dir (str): Write every round's overlays here when set
    """
    max_rounds: int = 20
    stall_window: int = 3
    stall_min_delta: int = 0
    failure_limit: int = 3
    candidate_cap: int = 8
    overlay_alpha: float = 0.45
    outline_width: int = 1
    overlay_mode: str = OverlayMode.PER_CANDIDATE
    max_image_side: int = 1024
    max_turns_factor: int = 3
    verify_after_update: bool = True
    keep_snapshots: bool = False
    time_limit: Optional[float] = None
    dump_overlays_dir: Optional[str] = None

    def __post_init__(self):
        checks = [
            (self.max_rounds >= 1, 'max_rounds must be >= 1'),
            (self.stall_window >= 1, 'stall_window must be >= 1'),
            (self.stall_min_delta >= 0, 'stall_min_delta must be >= 0'),
            (self.failure_limit >= 0, 'failure_limit must be >= 0'),
            (self.candidate_cap >= 1, 'candidate_cap must be >= 1'),
            (0.0 <= self.overlay_alpha <= 1.0, 'overlay_alpha must be in [0, 1]'),
            (self.outline_width >= 1, 'outline_width must be >= 1'),
            (self.overlay_mode in OverlayMode.values, f'overlay_mode must be one of {OverlayMode.values}'),
            (self.max_image_side >= 16, 'max_image_side must be >= 16'),
            (self.max_turns_factor >= 1, 'max_turns_factor must be >= 1'),
            (self.time_limit is None or self.time_limit > 0, 'time_limit must be positive'),
        ]
        for ok, message in checks:
            if not ok:
                raise InvalidConfig(message)

    @property
    def max_vlm_turns(self) -> int:
        return self.max_turns_factor * self.max_rounds

    def with_overrides(self, **overrides) -> 'EngineConfig':
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise InvalidConfig(f"unknown engine settings: {sorted(unknown)}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def snapshot(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TransportOptions:
    """Timeout and retry policy of one HTTP client."""
    timeout: float = 60.0
    retries: int = 2
    backoff: float = 0.5

    def __post_init__(self):
        if self.timeout <= 0:
            raise InvalidConfig('timeout must be positive')
        if self.retries < 0:
            raise InvalidConfig('retries must be >= 0')
        if self.backoff < 0:
            raise InvalidConfig('backoff must be >= 0')

    def with_section(self, section: dict) -> 'TransportOptions':
        return replace(self, **{key: section[key] for key in ('timeout', 'retries', 'backoff') if key in section})


@dataclass(frozen=True)
class BackendOptions:
    """
    Endpoint settings for the live VLM and segmenter clients. Each client
    has its own transport policy.
    """
    vlm_endpoint: str = ''
    vlm_model: str = ''
    vlm_api_key: str = ''
    seg_endpoint: str = ''
    vlm_transport: TransportOptions = field(default_factory=TransportOptions)
    seg_transport: TransportOptions = field(default_factory=TransportOptions)


@dataclass(frozen=True)
class BenchOptions:
    jobs: int = 1
    item_timeout: Optional[float] = 300.0
    query_field: str = 'long'

    def __post_init__(self):
        if self.jobs < 1:
            raise InvalidConfig('jobs must be >= 1')
        if self.query_field not in QueryField.values:
            raise InvalidConfig(f"query_field must be one of {QueryField.values}")


@dataclass(frozen=True)
class HarnessConfig:
    engine: EngineConfig
    backends: BackendOptions
    bench: BenchOptions


def _vasa_settings() -> dict:
    return dict(getattr(settings, 'VASA', {}))


def engine_config_from_settings(**overrides) -> EngineConfig:
    vasa = _vasa_settings()
    base = EngineConfig(
        max_rounds=vasa.get('MAX_ROUNDS', 20),
        stall_window=vasa.get('STALL_WINDOW', 3),
        stall_min_delta=vasa.get('STALL_MIN_DELTA', 0),
        failure_limit=vasa.get('FAILURE_LIMIT', 3),
        candidate_cap=vasa.get('CANDIDATE_CAP', 8),
        overlay_alpha=vasa.get('OVERLAY_ALPHA', 0.45),
        overlay_mode=vasa.get('OVERLAY_MODE', OverlayMode.PER_CANDIDATE),
        max_image_side=vasa.get('MAX_IMAGE_SIDE', 1024),
        keep_snapshots=vasa.get('KEEP_SNAPSHOTS', False),
    )
    return base.with_overrides(**overrides)


TRANSPORT_KEYS = {'timeout', 'retries', 'backoff'}
VLM_KEYS = {'endpoint', 'model', 'api_key'} | TRANSPORT_KEYS
SEGMENTER_KEYS = {'endpoint'} | TRANSPORT_KEYS


def _backend_section(payload: dict, name: str, allowed: set) -> dict:
    section = payload.get(name, {})
    if not isinstance(section, dict):
        raise InvalidConfig(f"config section {name!r} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise InvalidConfig(f"unknown {name} settings: {sorted(unknown)}")
    return section


def load_config(path=None) -> HarnessConfig:
    """Settings defaults, overlaid with the JSON config file when given."""
    vasa = _vasa_settings()
    engine = engine_config_from_settings()
    transport = TransportOptions(
        timeout=vasa.get('HTTP_TIMEOUT', 60.0),
        retries=vasa.get('TRANSPORT_RETRIES', 2),
        backoff=vasa.get('TRANSPORT_BACKOFF', 0.5),
    )
    backends = BackendOptions(
        vlm_endpoint=vasa.get('VLM_ENDPOINT', ''),
        vlm_model=vasa.get('VLM_MODEL', ''),
        vlm_api_key=vasa.get('VLM_API_KEY', ''),
        seg_endpoint=vasa.get('SEG_ENDPOINT', ''),
        vlm_transport=transport,
        seg_transport=transport,
    )
    bench = BenchOptions(
        jobs=vasa.get('JOBS', 1),
        item_timeout=vasa.get('ITEM_TIMEOUT', 300.0),
    )
    if path is None:
        return HarnessConfig(engine, backends, bench)

    try:
        payload = json.loads(Path(path).read_text(encoding='utf-8'))
    except (OSError, ValueError) as exc:
        raise InvalidConfig(f"cannot read config file {path}: {exc}")
    if not isinstance(payload, dict):
        raise InvalidConfig('config file must hold a JSON object')
    unknown_sections = set(payload) - {'engine', 'vlm', 'segmenter', 'bench'}
    if unknown_sections:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown_sections)}")

    vlm = _backend_section(payload, 'vlm', VLM_KEYS)
    segmenter = _backend_section(payload, 'segmenter', SEGMENTER_KEYS)
    try:
        engine = engine.with_overrides(**payload.get('engine', {}))
        backends = replace(
            backends,
            vlm_endpoint=vlm.get('endpoint', backends.vlm_endpoint),
            vlm_model=vlm.get('model', backends.vlm_model),
            vlm_api_key=vlm.get('api_key', backends.vlm_api_key),
            seg_endpoint=segmenter.get('endpoint', backends.seg_endpoint),
            vlm_transport=backends.vlm_transport.with_section(vlm),
            seg_transport=backends.seg_transport.with_section(segmenter),
        )
        bench = replace(bench, **payload.get('bench', {}))
    except TypeError as exc:
        raise InvalidConfig(f"invalid config file {path}: {exc}")
    return HarnessConfig(engine, backends, bench)


def resolve_config(path=None, *, max_rounds=None, vlm_endpoint=None, seg_endpoint=None,
                   jobs=None, dump_overlays=None, query_field=None) -> HarnessConfig:
    """load_config() plus command-line flags, which win over everything else."""
    config = load_config(path)
    engine = config.engine.with_overrides(max_rounds=max_rounds, dump_overlays_dir=dump_overlays)
    backends = replace(config.backends, **{
        key: value for key, value in (('vlm_endpoint', vlm_endpoint), ('seg_endpoint', seg_endpoint))
        if value
    })
    bench = replace(config.bench, **{
        key: value for key, value in (('jobs', jobs), ('query_field', query_field)) if value is not None
    })
    return HarnessConfig(engine, backends, bench)


# ===== BACKENDS =====

def build_vlm(backends: BackendOptions, script_path=None):
    """A ScriptBook when a script is given, else the live chat client."""
    if script_path:
        return ScriptBook.load(script_path)
    if not backends.vlm_endpoint or not backends.vlm_model:
        raise InvalidConfig('a VLM endpoint and model are required (or pass a scripted VLM)')
    return ChatCompletionsVlm(
        backends.vlm_endpoint, backends.vlm_model, api_key=backends.vlm_api_key,
        timeout=backends.vlm_transport.timeout, retries=backends.vlm_transport.retries,
        backoff=backends.vlm_transport.backoff,
    )


def build_segmenter(backends: BackendOptions, fixture_path=None):
    if fixture_path:
        return load_fixture_oracle(fixture_path)
    if not backends.seg_endpoint:
        raise InvalidConfig('a segmenter endpoint is required (or pass a scripted segmenter)')
    return HttpSegmenter(
        backends.seg_endpoint, timeout=backends.seg_transport.timeout,
        retries=backends.seg_transport.retries, backoff=backends.seg_transport.backoff,
    )
