"""Uniform access to the vision-language analyst and embedding backends."""

from .backends import AnalystRequest, BackendError, HashEmbeddingBackend, RemoteBackend, hash_embedding
from .gateway import AnalystGateway, Detection, GatewayError, RetryPolicy
from .oracle import PlantedChange, SyntheticOracle, change_text
from .parsing import AnswerParseError, RawChange, format_change_line, parse_abstractions, parse_change_line, parse_yes_no
from .templates import PromptTemplates

__all__ = [
    "AnalystGateway",
    "AnalystRequest",
    "AnswerParseError",
    "BackendError",
    "Detection",
    "GatewayError",
    "HashEmbeddingBackend",
    "PlantedChange",
    "PromptTemplates",
    "RawChange",
    "RemoteBackend",
    "RetryPolicy",
    "SyntheticOracle",
    "change_text",
    "format_change_line",
    "hash_embedding",
    "parse_abstractions",
    "parse_change_line",
    "parse_yes_no",
]
