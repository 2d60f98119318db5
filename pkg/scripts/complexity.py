"""Print parameter counts of every architecture next to the reference table."""
from tdmr.experiment import format_complexity_table

if __name__ == "__main__":
    print(format_complexity_table())
