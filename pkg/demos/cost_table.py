"""Print the training and inference cost table at the typical settings.

Run: python demos/cost_table.py
"""

from shotpack.costmodel import TYPICAL, cost_report, format_table

report = cost_report(TYPICAL)
print(format_table(report))
