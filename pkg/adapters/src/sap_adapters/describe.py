"""Description generation: red-box overlay plus the fixed witness-style prompt
for every crop, executed against a wire-contract endpoint."""

from __future__ import annotations

import tempfile
from pathlib import Path

import requests

from .fileio import AdapterError, read_jsonl, resolve_uri, write_jsonl
from .overlay import render_overlay_file

DESCRIPTION_PROMPT = (
    "Generate a description of the individual within the red bounding box and the "
    "connection with the surroundings. Ensure that the description is a natural, "
    "fluent paragraph (under 50 words) that a real witness would actually say to "
    "police or friends when trying to help find this exact person. Do not include "
    "text details or labels, and strictly avoid any punctuation other than commas "
    "and periods."
)
MAX_TOKENS = 128


def _describe_one(endpoint: str, model: str, image_uri: str, timeout: float) -> str:
    body = {
        "model": model,
        "max_tokens": MAX_TOKENS,
        "temperature": 0,
        "messages": [
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": DESCRIPTION_PROMPT},
                    {"type": "image", "uri": image_uri},
                ],
            }
        ],
    }
    try:
        response = requests.post(endpoint, json=body, timeout=timeout)
    except requests.RequestException as exc:
        raise AdapterError(f"description request failed: {exc}") from exc
    if response.status_code != 200:
        raise AdapterError(f"description endpoint returned HTTP {response.status_code}")
    try:
        text = response.json()["text"]
    except (ValueError, KeyError, TypeError):
        raise AdapterError("description endpoint response missing text field") from None
    if not isinstance(text, str):
        raise AdapterError("description endpoint response missing text field")
    return text


def generate_descriptions(
    manifest: str | Path,
    detections: str | Path,
    endpoint: str,
    model: str,
    out: str | Path,
    *,
    spool_dir: str | Path | None = None,
    timeout: float = 120.0,
) -> tuple[int, int]:
    """One description per crop; failures are recorded per crop and the job
    continues. Returns (succeeded, failed); failures land in <out>.errors.jsonl.
    """
    base = Path(manifest).parent
    images: dict[str, dict] = {}
    for lineno, record in read_jsonl(manifest):
        try:
            images[record["image_id"]] = record
        except KeyError:
            raise AdapterError(f"{manifest}:{lineno}: missing image_id") from None
    spool = Path(spool_dir) if spool_dir else Path(tempfile.mkdtemp(prefix="sap-describe-"))
    spool.mkdir(parents=True, exist_ok=True)

    rows: list[dict] = []
    errors: list[dict] = []
    for lineno, record in read_jsonl(detections):
        try:
            crop_id = record["crop_id"]
            image_id = record["image_id"]
            bbox = tuple(record["bbox"])
        except (KeyError, TypeError):
            raise AdapterError(f"{detections}:{lineno}: malformed detection record") from None
        if image_id not in images:
            raise AdapterError(f"{detections}:{lineno}: unknown image_id {image_id!r}")
        try:
            source = resolve_uri(images[image_id]["uri"], base)
            boxed = render_overlay_file(source, bbox, spool / f"{crop_id}.png")
            text = _describe_one(endpoint, model, boxed.resolve().as_uri(), timeout)
            rows.append({"crop_id": crop_id, "text": text})
        except (AdapterError, OSError) as exc:
            errors.append({"crop_id": crop_id, "error": str(exc)})
    write_jsonl(out, rows)
    errors_path = Path(str(out) + ".errors.jsonl")
    if errors:
        write_jsonl(errors_path, errors)
    elif errors_path.exists():
        errors_path.unlink()
    return len(rows), len(errors)
