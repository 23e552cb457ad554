"""Reference adapter: serve any classifier callable over the faud-bb protocol."""

from .server import AdapterSession, serve

__version__ = "0.1.0"

__all__ = ["AdapterSession", "serve", "__version__"]
