"""Sends a sample batch to the keyword endpoint and prints the result.

Usage: PREFSYNTH_KEYWORD_ENDPOINT_URL=http://localhost:9000/keywords \
    poetry run python scripts/check_keyword_endpoint.py
"""
import json
import sys

from prefsynth.core.errors import PrefSynthError
from prefsynth.core.keyword_client import KeywordClient

SAMPLE = [
    "red running shoe with white sole",
    "blue leather handbag with gold clasp",
]

try:
    client = KeywordClient(retry_attempts=1)
    keywords = client.extract_sync(SAMPLE)
except PrefSynthError as e:
    print("keyword endpoint error:", json.dumps(e.to_record()))
    sys.exit(e.exit_code)

for text, words in zip(SAMPLE, keywords):
    print(f"{text!r} -> {words}")
