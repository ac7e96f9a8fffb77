from .base import CONNECTIVITIES, TextureEngine
from .naive import NaiveTextureEngine
from .optimized import OptimizedTextureEngine

ENGINES = {
    "naive": NaiveTextureEngine,
    "optimized": OptimizedTextureEngine,
}
