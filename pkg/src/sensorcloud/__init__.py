"""Trust-point security architecture for cloud-hosted sensor data.

Sensor readings are sealed at the home-domain gateway (the trust point), stored
only in sealed form by the cloud, and opened solely by service instances the
data owner approved.
"""

__version__ = "0.1.0"
