from .client import Client
from .protocol import (
    Opcode,
    Request,
    Response,
    Status,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
)
from .server import Server, ServerThread, handle, serve

__all__ = [
    "Client",
    "Opcode",
    "Request",
    "Response",
    "Server",
    "ServerThread",
    "Status",
    "decode_request",
    "decode_response",
    "encode_request",
    "encode_response",
    "handle",
    "serve",
]
