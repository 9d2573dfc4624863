from index import app

# gunicorn --chdir api wsgi:application
application = app
