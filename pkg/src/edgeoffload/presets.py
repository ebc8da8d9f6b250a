"""Bundled measurement presets: per-model round-trip times for cloud and
on-premises GPU/CPU serving, the person-tracking latencies, and the monthly
pricing of cloud inference options versus an on-prem workstation.
"""

from __future__ import annotations

from .domain import ModelProfile

# model key -> (display name, model size MB, cloud GPU, onprem GPU, cloud CPU, onprem CPU)
# mean round trip in ms over 100 requests with a 192 KB JPEG payload
_ROUNDTRIP_TABLE = {
    "faster_rcnn_resnet101": ("Faster RCNN ResNet 101", 196.5, 1517, 114, 1615, 676),
    "ssd_mobilenet_v1": ("SSD MobileNet V1", 29.1, 340, 77, 459, 54),
    "ssd_mobilenet_v2": ("SSD MobileNet V2", 69.7, 354, 75, 719, 65),
    "ssd_inception_v2": ("SSD Inception V2", 102, 366, 80, 624, 69),
    "faster_rcnn_inception_v2": ("Faster RCNN Inception V2", 57.2, 619, 89, 726, 221),
    "mask_rcnn_inception_v2": ("Mask RCNN Inception V2", 67.1, 789, 97, 801, 321),
    "deeplab_v3": ("DeepLab V3", 23, 925, 70, 1371, 272),
    "deeplab_v3_xception": ("DeepLab V3 Xception", 447, 3124, 147, 3061, 1585),
}

MODEL_KEYS = tuple(_ROUNDTRIP_TABLE)
SITES = ("cloud", "onprem")
DEVICES = ("gpu", "cpu")

PAYLOAD_BYTES = 192 * 1024

CLOUD_JITTER = 0.3
EDGE_JITTER = 0.05

# DeepLab V3, GPU: cloud round trip vs the same request served on-prem
TRACKING_CLOUD_RTT_MS = 779.0
TRACKING_EDGE_RTT_MS = 72.0
WALK_SPEED_MPS = 1.5
FOV_LIMIT_M = 0.5

MONTH_HOURS = 744.0


def display_name(model_key: str) -> str:
    return _ROUNDTRIP_TABLE[model_key][0]


def model_profiles() -> dict:
    out = {}
    for key, (_, size, cg, og, cc, oc) in _ROUNDTRIP_TABLE.items():
        out[key] = ModelProfile(
            model_name=key,
            model_size_mb=float(size),
            service_time_ms={
                ("cloud", "gpu"): cg,
                ("onprem", "gpu"): og,
                ("cloud", "cpu"): cc,
                ("onprem", "cpu"): oc,
            },
        )
    return out


def profile_name(model_key: str, site: str, device: str) -> str:
    return f"{model_key}/{site}/{device}"


def default_jitter(site: str) -> float:
    return CLOUD_JITTER if site == "cloud" else EDGE_JITTER


def roundtrip_profiles(jitter: float = None) -> dict:
    """Measured latency profiles for every (model, site, device) cell,
    keyed ``model/site/device``. ``jitter`` overrides the per-site default."""
    from .sim.latency import LatencyProfile

    out = {}
    for key, model in model_profiles().items():
        for site in SITES:
            for device in DEVICES:
                out[profile_name(key, site, device)] = LatencyProfile(
                    mode="measured",
                    measured_rtt_ms=model.service_time(site, device),
                    jitter_fraction=default_jitter(site) if jitter is None else jitter,
                )
    return out


def tracking_profiles(jitter: float = None) -> dict:
    from .sim.latency import LatencyProfile

    return {
        "tracking_cloud": LatencyProfile(
            mode="measured",
            measured_rtt_ms=TRACKING_CLOUD_RTT_MS,
            jitter_fraction=CLOUD_JITTER if jitter is None else jitter,
        ),
        "tracking_edge": LatencyProfile(
            mode="measured",
            measured_rtt_ms=TRACKING_EDGE_RTT_MS,
            jitter_fraction=EDGE_JITTER if jitter is None else jitter,
        ),
    }


PRESET_GROUPS = {
    "roundtrip": roundtrip_profiles,
    "tracking": tracking_profiles,
}


def pricing_rows() -> list:
    """Monthly cost rows for one continuously processed video stream."""
    return [
        {"label": "AWS p3.2xlarge", "mode": "instance", "hourly_instance_usd": 3.06},
        {"label": "AWS Rekognition Video", "mode": "per_minute", "per_minute_video_usd": 0.1},
        {"label": "AWS Rekognition Image", "mode": "per_image_fps", "per_1000_images_usd": 0.4, "fps": 1},
        {"label": "GCP Vision Object", "mode": "per_image_fps", "per_1000_images_usd": 1.5, "fps": 1},
        {
            "label": "On-premise workstation with GPU",
            "mode": "onprem",
            "workstation_capex_usd": 5000,
            "workstation_power_kw": 0.5,
            "electricity_usd_per_kwh": 0.2,
        },
    ]


# reference monthly figures, shown alongside the computed ones
REFERENCE_MONTHLY_USD = {
    "AWS p3.2xlarge": 2277,
    "AWS Rekognition Video": 4464,
    "AWS Rekognition Image": 1071,
    "GCP Vision Object": 4017,
    "On-premise workstation with GPU": 75,
}
