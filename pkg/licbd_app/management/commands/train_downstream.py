from licbd_app.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Train the toy segmenters and the toy face embedder'
    subcommand = 'train-downstream'

    def report(self, result):
        super().report(result)
        if not result.summary.get('meets_bar', True):
            self.stdout.write(
                self.style.WARNING('A toy segmenter is below the 0.90 held-out pixel accuracy bar')
            )
