"""HTTP service exposing the fit / eval / sweep / synth pipeline."""

from oodkit.service.app import app, create_app

__all__ = ["app", "create_app"]
