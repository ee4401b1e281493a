"""Simulator of an edge / federated-learning / permissioned-ledger healthcare IoT stack."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("carechain")
except PackageNotFoundError:
    __version__ = "unknown"
