"""fedmesh: a small federated-learning runtime with a star-topology relay."""

__version__ = "0.1.0"
