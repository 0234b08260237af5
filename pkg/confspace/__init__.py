from confspace.config import RunConfig, load_config
from confspace.configuration import Configuration
from confspace.domain import TorusDomain, Window
from confspace.suites import run_suite

__all__ = ("Configuration", "RunConfig", "TorusDomain", "Window", "load_config", "run_suite")
