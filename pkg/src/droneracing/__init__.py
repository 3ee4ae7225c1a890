"""Drone racing simulation and curriculum reinforcement learning stack.

The package provides a quadrotor simulator with collective-thrust /
body-rate control, procedurally generated obstacle scenes with safety
guarantees, a ray-cast depth camera, a racing reward, a three-level
training curriculum, and a recurrent PPO trainer with an evaluation
harness.
"""

__version__ = "0.1.0"
