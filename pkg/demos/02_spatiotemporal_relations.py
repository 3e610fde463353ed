"""Pairwise distance and time-gap relations between the check-ins of a window."""

import numpy as np

from starhit import geotime

times_square = (40.7580, -73.9855)
jfk = (40.6413, -73.7781)
print(f"Times Square -> JFK: {geotime.haversine(times_square, jfk):.2f} km")

# time gaps are bucketed into seven levels, from under an hour to over a month
for gap in (600, 3 * 3600, 20 * 3600, 3 * 86400, 10 * 86400, 20 * 86400, 60 * 86400):
    print(f"gap {gap / 3600:8.1f} h -> level {int(geotime.time_level(gap))}")

coords = np.array([times_square, times_square, jfk, (0.0, 0.0)])
stamps = np.array([0, 1800, 7200, 0])
mask = np.array([True, True, True, False])  # last row is padding
spatial, temporal = geotime.relation_arrays(coords, stamps, mask)
np.set_printoptions(precision=3, suppress=True)
print("spatial (km, floored so the log stays finite):\n", spatial)
print("temporal levels:\n", temporal)
