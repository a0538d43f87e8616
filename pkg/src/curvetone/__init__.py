"""curvetone: Bezier tone-curve image enhancement with an RL-trained policy.

Tone adjustments are cubic Bezier curves chosen step by step by a policy
network trained with Soft Actor-Critic against an image/text similarity
reward; at test time the per-step curves are folded into a single lookup
table so full-resolution cost is one gather per pixel.
"""

__version__ = "0.1.0"
