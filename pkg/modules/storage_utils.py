# modules/storage_utils.py
import hashlib
import io
import json
import os
import tempfile
from datetime import datetime

import numpy as np
from PIL import Image

from modules.errors import StorageError


def write_bytes(path, payload):
    """Write to a temp file in the target directory, then replace the target."""
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    return path


def dumps_json(data):
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def write_json(path, data):
    """Deterministic JSON (sorted keys, 2-space indent), written atomically."""
    return write_bytes(path, dumps_json(data).encode("utf-8"))


def read_json(path):
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise StorageError(f"missing file {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise StorageError(f"cannot read {path}: {e}") from e


def write_png(path, array):
    """Save a uint16 grayscale, uint8 grayscale or uint8 RGB array as PNG."""
    array = np.ascontiguousarray(array)
    supported = (array.dtype == np.uint16 and array.ndim == 2) or (array.dtype == np.uint8 and array.ndim in (2, 3))
    if not supported:
        raise StorageError(f"unsupported PNG array dtype={array.dtype} shape={array.shape}")
    image = Image.fromarray(array)
    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    return write_bytes(path, buffer.getvalue())


def read_png(path):
    """Load a PNG; 16-bit grayscale comes back as uint16."""
    try:
        with Image.open(path) as image:
            image.load()
            if image.mode in ("I;16", "I;16B", "I;16L", "I"):
                return np.array(image).astype(np.uint16)
            return np.array(image)
    except FileNotFoundError as e:
        raise StorageError(f"missing image {path}") from e
    except OSError as e:
        raise StorageError(f"cannot read image {path}: {e}") from e


def sha256_bytes(payload):
    return hashlib.sha256(payload).hexdigest()


def sha256_file(path):
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                digest.update(block)
    except OSError as e:
        raise StorageError(f"cannot hash {path}: {e}") from e
    return digest.hexdigest()


def fingerprint(*parts):
    """Hash of JSON-serialisable parts; file paths should be passed as their content hashes."""
    return sha256_bytes(json.dumps(parts, sort_keys=True, default=str).encode("utf-8"))


def stamp_is_current(stamp_path, input_fingerprint):
    """True when a stage stamp matches the inputs and every recorded output is unchanged."""
    if not os.path.exists(stamp_path):
        return False
    try:
        stamp = read_json(stamp_path)
    except StorageError:
        return False
    if stamp.get("inputs") != input_fingerprint:
        return False
    for path, digest in stamp.get("outputs", {}).items():
        if not os.path.exists(path) or sha256_file(path) != digest:
            return False
    return True


def write_stamp(stamp_path, input_fingerprint, outputs):
    return write_json(stamp_path, {
        "inputs": input_fingerprint,
        "outputs": {path: sha256_file(path) for path in sorted(outputs)},
    })


# Dashboard save slots. These keep the (success, result) convention so pages can
# report problems inline instead of raising.

def save_data_to_file(data, data_type, save_name, root="."):
    """Save a JSON payload under ``saved_{data_type}/``.

    Returns:
        tuple: (success: bool, filepath or error message)
    """
    try:
        directory = os.path.join(root, f"saved_{data_type}")
        filename = os.path.join(directory, f"{data_type}_{save_name}.json")
        write_json(filename, {
            "save_name": save_name,
            "data_type": data_type,
            "data": data,
            "saved_timestamp": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
        })
        return True, filename
    except Exception as e:
        return False, str(e)


def load_data_from_file(filepath):
    """Returns:
        tuple: (data or None, saved timestamp or error message)
    """
    try:
        save_data = read_json(filepath)
        return save_data["data"], save_data.get("saved_timestamp", "Unknown")
    except Exception as e:
        return None, str(e)


def get_saved_data_list(data_type, root="."):
    """List saved files of one type, newest first."""
    try:
        directory = os.path.join(root, f"saved_{data_type}")
        if not os.path.exists(directory):
            return []

        saved_files = []
        prefix = f"{data_type}_"
        for filename in os.listdir(directory):
            if filename.startswith(prefix) and filename.endswith(".json"):
                filepath = os.path.join(directory, filename)
                mtime = os.path.getmtime(filepath)
                saved_files.append({
                    "save_name": filename[len(prefix):-5],
                    "filename": filename,
                    "filepath": filepath,
                    "modified": datetime.fromtimestamp(mtime).strftime("%Y-%m-%d %H:%M:%S"),
                })
        saved_files.sort(key=lambda x: x["modified"], reverse=True)
        return saved_files
    except Exception:
        return []


def delete_saved_data(filepath):
    try:
        if os.path.exists(filepath):
            os.remove(filepath)
        return True, "File deleted successfully"
    except Exception as e:
        return False, str(e)
