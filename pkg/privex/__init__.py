"""Namespace package root. ``permlab`` lives at :mod:`privex.permlab`."""
__path__ = __import__('pkgutil').extend_path(__path__, __name__)
