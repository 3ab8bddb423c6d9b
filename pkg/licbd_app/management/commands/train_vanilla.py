from licbd_app.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Train one clean codec per lambda in codec.lambdas'
    subcommand = 'train-vanilla'
