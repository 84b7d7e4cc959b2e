"""
rerender_pi
Two-branch neural re-rendering of degraded captures of people.
"""

__version__ = '0.1.0'
