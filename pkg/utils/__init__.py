# Utils module 