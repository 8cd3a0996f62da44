#!/usr/bin/env python3
"""Download ImageNet-pretrained VGG-16 and export its first ten convolutions.

Writes a safetensors archive keyed `features.{idx}.weight` / `.bias`
(float32, torchvision indices 0 to 21) and prints its SHA-256.

    python3 scripts/fetch_vgg16.py weights/vgg16_features.safetensors
"""

import argparse
import hashlib
import json
import os
import struct
import tempfile

import numpy as np

CONV_INDICES = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21]


def load_state_dict():
    from torchvision.models import VGG16_Weights, vgg16

    model = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def safetensors_bytes(tensors):
    header, blobs, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        blobs.append(raw)
        offset += len(raw)
    header["__metadata__"] = {"source": "torchvision vgg16 IMAGENET1K_V1"}
    text = json.dumps(header, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + b"".join(blobs)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", nargs="?", default="weights/vgg16_features.safetensors")
    args = parser.parse_args()

    state = load_state_dict()
    keep = {}
    for idx in CONV_INDICES:
        for suffix in ("weight", "bias"):
            key = f"features.{idx}.{suffix}"
            keep[key] = state[key]
    data = safetensors_bytes(keep)

    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=out_dir, delete=False) as tmp:
        tmp.write(data)
    os.replace(tmp.name, args.out)
    print(f"wrote {args.out} ({len(data)} bytes)")
    print(f"sha256 {hashlib.sha256(data).hexdigest()}")


if __name__ == "__main__":
    main()
