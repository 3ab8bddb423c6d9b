from licbd_app.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Collect every report of a run directory into report.csv and summary.json'
    subcommand = 'report'
