"""
DecisionBench Analysis Toolkit Package
"""

__version__ = "1.0.0"
__author__ = "DecisionBench maintainers"
__description__ = "Offline analysis of profile-aware delegation traces: tagging, profiles, metrics and statistics"
