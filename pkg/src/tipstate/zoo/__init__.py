from .builders import (BUILDERS, build, build_rw, build_squeezenet_like,
                       build_vgg_like)
from .checkpoint import (FORMAT_VERSION, load_checkpoint, read_container,
                         save_checkpoint, write_container)
from .graph import NetworkGraph

__all__ = [
    "BUILDERS", "FORMAT_VERSION", "NetworkGraph", "build", "build_rw",
    "build_squeezenet_like", "build_vgg_like", "load_checkpoint", "read_container",
    "save_checkpoint", "write_container",
]
