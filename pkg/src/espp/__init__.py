"""Emergency stopping path planning on an adaptive potential field.

Modules: ``potential_field`` (field and heading), ``emergency_trigger``
(blind-alley detection), ``clothoid`` (cubic curve fits), ``espp_planner``
(stop point and escape curve), ``vehicle_model`` (2-DOF bicycle),
``mpc_controller`` and ``qp_core`` (tracking QP), ``simulator`` (cut-in
scenario and metrics), ``cli``.
"""

__version__ = "0.1.0"
