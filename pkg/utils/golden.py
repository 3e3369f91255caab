import os
import json
import logging
import hashlib
from typing import Optional

import config

GOLDEN_DIR = config.GOLDEN_DIR
INDEX_FILE = "index.json"


def _index_path(golden_dir: str) -> str:
    return os.path.join(golden_dir, INDEX_FILE)


def init_golden_directory(golden_dir: str = GOLDEN_DIR) -> bool:
    """Create the golden directory and its index if they don't exist"""
    try:
        os.makedirs(golden_dir, exist_ok=True)
        if not os.path.exists(_index_path(golden_dir)):
            with open(_index_path(golden_dir), 'w', encoding='utf-8') as f:
                json.dump({}, f)
        return True
    except OSError as e:
        logging.error(f"Failed to initialize golden directory {golden_dir}: {e}")
        return False


def get_golden_key(scenario: str, provider: str = "mock") -> str:
    """File stem for a scenario's golden trace; non-mock providers get a suffix"""
    stem = os.path.splitext(os.path.basename(scenario))[0]
    return stem if provider == "mock" else f"{stem}.{provider}"


def trace_digest(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def save_golden(key: str, text: str, golden_dir: str = GOLDEN_DIR) -> bool:
    """Bless a trace: write it and record its digest in the index"""
    try:
        init_golden_directory(golden_dir)
        with open(os.path.join(golden_dir, f"{key}.trace"), 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)

        with open(_index_path(golden_dir), 'r', encoding='utf-8') as f:
            index = json.load(f)
        index[key] = {'digest': trace_digest(text), 'lines': text.count('\n')}
        with open(_index_path(golden_dir), 'w', encoding='utf-8') as f:
            json.dump(index, f, indent=2, sort_keys=True)

        logging.info(f"Golden trace for '{key}' blessed")
        return True
    except (OSError, json.JSONDecodeError) as e:
        logging.error(f"Failed to save golden trace '{key}': {e}")
        return False


def get_golden(key: str, golden_dir: str = GOLDEN_DIR) -> Optional[str]:
    """Golden trace text, or None when it has not been blessed yet"""
    path = os.path.join(golden_dir, f"{key}.trace")
    try:
        if not os.path.exists(path):
            return None
        with open(path, 'r', encoding='utf-8') as f:
            return f.read()
    except OSError as e:
        logging.error(f"Error reading golden trace '{key}': {e}")
        return None


__all__ = [
    'init_golden_directory',
    'get_golden_key',
    'trace_digest',
    'save_golden',
    'get_golden',
    'GOLDEN_DIR',
]
