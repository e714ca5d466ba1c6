from .dict import merge_dicts
from .logger import Logger
from .template_manager import TemplateManager
from .worker_pool import WorkerPool

__all__ = ["Logger", "TemplateManager", "merge_dicts", "WorkerPool"]
